//! Central finite-difference verification of analytic gradients.

use super::{EncoderParams, ParamGrads, Tensor};
use rand_chacha::ChaCha8Rng;

/// Relative error between an analytic and a numeric derivative.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn pick_coords(rng: &mut ChaCha8Rng, len: usize, want: usize) -> Vec<usize> {
    if want >= len {
        (0..len).collect()
    } else {
        rand::seq::index::sample(rng, len, want).into_vec()
    }
}

/// Checks an analytic gradient of a scalar function over a flat vector by
/// central differences on a random coordinate subsample. Returns the max
/// relative error over the checked coordinates.
pub fn finite_diff_flat<F>(
    mut loss_fn: F,
    x: &[f64],
    analytic: &[f64],
    h: f64,
    rng: &mut ChaCha8Rng,
    max_coords: usize,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut work = x.to_vec();
    let mut worst = 0.0f64;
    for i in pick_coords(rng, x.len(), max_coords) {
        let orig = work[i];
        work[i] = orig + h;
        let up = loss_fn(&work);
        work[i] = orig - h;
        let dn = loss_fn(&work);
        work[i] = orig;
        let numeric = (up - dn) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

/// Checks parameter gradients of a scalar loss over the encoder parameters.
/// Each tensor is subsampled independently (all coordinates when the tensor
/// is smaller than `coords_per_tensor`).
pub fn finite_diff_check<F>(
    loss_fn: F,
    params: &EncoderParams<f64>,
    batch: &Tensor<f64>,
    h: f64,
    analytic: &ParamGrads<f64>,
    rng: &mut ChaCha8Rng,
    coords_per_tensor: usize,
) -> f64
where
    F: Fn(&EncoderParams<f64>, &Tensor<f64>) -> f64,
{
    let mut work = params.clone();
    let mut worst = 0.0f64;
    for slot in 0..super::TENSOR_NAMES.len() {
        let len = work.tensors()[slot].1.len();
        for i in pick_coords(rng, len, coords_per_tensor) {
            let orig = work.tensors()[slot].1.data[i];
            work.tensors_mut()[slot].1.data[i] = orig + h;
            let up = loss_fn(&work, batch);
            work.tensors_mut()[slot].1.data[i] = orig - h;
            let dn = loss_fn(&work, batch);
            work.tensors_mut()[slot].1.data[i] = orig;
            let numeric = (up - dn) / (2.0 * h);
            let ga = analytic.tensors()[slot].1.data[i];
            worst = worst.max(rel_err(ga, numeric));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{backward, forward, EncoderArch, EncoderParams, Tensor};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn quadratic(params: &EncoderParams<f64>, _batch: &Tensor<f64>) -> f64 {
        params.tensors().iter().map(|(_, t)| t.data.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
            / 2.0
    }

    #[test]
    fn quadratic_loss_is_exact() {
        // Central differences have zero truncation error on a quadratic, so a
        // wide step sidesteps cancellation noise; shrunk parameters keep the
        // summed loss small for the same reason.
        let arch = EncoderArch::new(8, 3, 3);
        let mut params = EncoderParams::<f64>::init(arch, 1).unwrap();
        for (_, t) in params.tensors_mut() {
            for v in &mut t.data {
                *v *= 1e-3;
            }
        }
        let batch = Tensor::zeros(&[1, 3, 8, 8]);
        let analytic = params.clone(); // gradient of ||p||^2/2 is p
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = finite_diff_check(quadratic, &params, &batch, 1e-2, &analytic, &mut rng, 200);
        assert!(err <= 1e-9, "quadratic check error {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let arch = EncoderArch::new(8, 3, 3);
        let params = EncoderParams::<f64>::init(arch, 1).unwrap();
        let batch = Tensor::zeros(&[1, 3, 8, 8]);
        let mut analytic = params.clone();
        // Double the best-populated coordinate and sample every coordinate so
        // the corruption is always visited.
        let worst = (0..analytic.fc_w.len())
            .max_by(|&a, &b| {
                analytic.fc_w.data[a].abs().total_cmp(&analytic.fc_w.data[b].abs())
            })
            .unwrap();
        analytic.fc_w.data[worst] *= 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err =
            finite_diff_check(quadratic, &params, &batch, 1e-2, &analytic, &mut rng, usize::MAX);
        assert!(err > 0.3, "corruption not detected: {err}");
    }

    #[test]
    fn encoder_jacobian_matches_finite_differences() {
        let arch = EncoderArch::new(8, 3, 3);
        let params = EncoderParams::<f64>::init(arch, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut batch = Tensor::zeros(&[2, 3, 8, 8]);
        for v in &mut batch.data {
            *v = rng.gen_range(0.0..1.0);
        }
        // Scalar readout: random fixed cotangent against the embeddings.
        let mut cot = Tensor::zeros(&[2, arch.d_emb]);
        for v in &mut cot.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        let loss = |p: &EncoderParams<f64>, b: &Tensor<f64>| {
            let emb = forward(p, b).unwrap();
            emb.data.iter().zip(&cot.data).map(|(e, c)| e * c).sum()
        };
        let (grads, d_input) = backward(&params, &batch, &cot).unwrap();
        let err = finite_diff_check(loss, &params, &batch, 1e-5, &grads, &mut rng, 200);
        assert!(err <= 1e-5, "parameter gradient error {err}");

        // Input-side gradient.
        let shape = batch.shape.clone();
        let input_loss = |x: &[f64]| {
            let b = Tensor::from_vec(&shape, x.to_vec()).unwrap();
            let emb = forward(&params, &b).unwrap();
            emb.data.iter().zip(&cot.data).map(|(e, c)| e * c).sum()
        };
        let err =
            finite_diff_flat(input_loss, &batch.data, &d_input.data, 1e-5, &mut rng, 200);
        assert!(err <= 1e-5, "input gradient error {err}");
    }
}
