// temporary calibration probe
use swaplab_core::blend::BlendConfig;
use swaplab_core::margin::MarginConfig;
use swaplab_core::pretrain::{pretrain, PretrainConfig};
use swaplab_core::synth::{gen_dataset, SynthConfig};

fn main() {
    let ds = gen_dataset(&SynthConfig { master_seed: 1, ..SynthConfig::default() }).unwrap();
    let mcfg = MarginConfig { classes: 200, ..MarginConfig::default() };
    let bcfg = BlendConfig::for_image_size(32);
    for p in [0.0, 0.5] {
        let pcfg = PretrainConfig { p_replace: p, seed: 1, ..PretrainConfig::default() };
        let t = std::time::Instant::now();
        let ckpt = pretrain(&ds, &pcfg, &mcfg, &bcfg).unwrap();
        println!("p={p}: {:?} clean_acc={:.4}", t.elapsed(), ckpt.final_clean_accuracy);
        for row in ckpt.training_log.iter().step_by(4) {
            println!("  epoch {}: loss={:.4} acc={:.4}", row.epoch, row.loss, row.accuracy);
        }
    }
}
