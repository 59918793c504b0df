//! Command-line laboratory for measuring and removing attribute bias in
//! identity-embedding encoders on a synthetic face universe.

mod commands;
mod config;
mod error;
mod manifest;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use commands::DatasetRole;
use config::{extract_overrides, load_config, RunConfig, OVERRIDE_KEYS};
use error::{error_report, exit_code, CodedError};
use std::path::PathBuf;

fn override_help() -> String {
    let mut s = String::from(
        "Any config key can be overridden with --section.key=value, e.g. \
         --synth.rho=0.5 --pretrain.epochs=10. Keys:\n",
    );
    for (key, help) in OVERRIDE_KEYS {
        s.push_str(&format!("  --{key:<38} {help}\n"));
    }
    s
}

#[derive(Parser)]
#[command(
    name = "swaplab",
    version,
    about = "Synthetic-face laboratory for attribute bias in identity encoders",
    after_long_help = override_help()
)]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, value_name = "FILE", global = true)]
    config: Option<PathBuf>,

    /// Master seed; reseeds every subsystem deterministically.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Run the 64-bit gradient-check suite before the command.
    #[arg(long = "f64-checks", global = true)]
    f64_checks: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Role {
    Train,
    Holdout,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset shard.
    GenDataset {
        #[arg(long)]
        out: PathBuf,
        /// Train universe or the held-out verification universe.
        #[arg(long, value_enum, default_value = "train")]
        role: Role,
    },
    /// Train an encoder with pseudo-positive replacement.
    Pretrain {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace probability; overrides pretrain.p_replace.
        #[arg(long)]
        p: Option<f64>,
    },
    /// Similarity-distribution experiment for one encoder.
    Analyze {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train across replace probabilities and tabulate the gaps.
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated verification accuracy on a held-out shard.
    Verify {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss-suite report over sampled pairs with the oracle swapper.
    Losses {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        /// Pair-sampling seed.
        #[arg(long = "seed", default_value_t = 0, id = "pair_seed")]
        pair_seed: u64,
        #[arg(long, default_value = "losses.json")]
        report: PathBuf,
    },
    /// Occlusion-sensitivity saliency maps and inner-face fractions.
    Saliency {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Swap metric table over several encoders.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Model directories, repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write anchor/candidate/mask/blend images for one sample.
    BlendPreview {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Candidate-draw seed.
        #[arg(long = "sample-seed", default_value_t = 0)]
        sample_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline end to end: datasets, both encoders, every analysis.
    Repro {
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_f64_checks() -> Result<()> {
    eprintln!("running 64-bit gradient checks (20 seeds)...");
    let reports = swaplab_core::gradsuite::run_gradient_suite(20, 200, 1e-5)
        .map_err(error::invariant)?;
    let mut failed = false;
    for r in &reports {
        eprintln!(
            "  {:<28} max_rel_err={:.3e} [{}]",
            r.name,
            r.max_rel_err,
            if r.passed() { "pass" } else { "FAIL" }
        );
        failed |= !r.passed();
    }
    if failed {
        return Err(CodedError::invariant("gradient checks failed").into());
    }
    Ok(())
}

fn dispatch(cli: Cli, cfg: &RunConfig) -> Result<()> {
    match cli.command {
        Command::GenDataset { out, role } => {
            let role = if role == Role::Train { DatasetRole::Train } else { DatasetRole::Holdout };
            commands::gen_dataset_cmd(cfg, &out, role)
        }
        Command::Pretrain { dataset, out, p } => {
            let mut cfg = cfg.clone();
            if let Some(p) = p {
                cfg.pretrain.p_replace = p;
            }
            commands::pretrain_cmd(&cfg, &dataset, &out)
        }
        Command::Analyze { dataset, model, out } => commands::analyze_cmd(cfg, &dataset, &model, &out),
        Command::Sweep { dataset, out } => commands::sweep_cmd(cfg, &dataset, &out),
        Command::Verify { dataset, model, out } => commands::verify_cmd(cfg, &dataset, &model, &out),
        Command::Losses { dataset, model, pairs, pair_seed, report } => {
            commands::losses_cmd(cfg, &dataset, &model, pairs, pair_seed, &report)
        }
        Command::Saliency { dataset, model, out } => {
            commands::saliency_cmd(cfg, &dataset, &model, &out)
        }
        Command::Eval { dataset, models, out } => commands::eval_cmd(cfg, &dataset, &models, &out),
        Command::BlendPreview { dataset, index, sample_seed, out } => {
            commands::blend_preview_cmd(cfg, &dataset, index, sample_seed, &out)
        }
        Command::Repro { out } => commands::repro_cmd(cfg, &out),
    }
}

fn main() {
    let raw: Vec<String> = std::env::args().collect();
    let result = (|| -> Result<()> {
        let (overrides, rest) =
            extract_overrides(raw).map_err(|e| CodedError::config(e.to_string()))?;
        let cli = Cli::parse_from(rest);
        if let Some(threads) = cli.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
                .map_err(|e| CodedError::invariant(e.to_string()))?;
        }
        let cfg = load_config(cli.config.as_deref(), &overrides, cli.seed)
            .map_err(|e| CodedError::config(e.to_string()))?;
        if cli.f64_checks {
            run_f64_checks()?;
        }
        dispatch(cli, &cfg)
    })();

    if let Err(err) = result {
        eprintln!("{}", error_report(&err));
        std::process::exit(exit_code(&err));
    }
}
