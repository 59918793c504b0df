//! Differentiable network core.
//!
//! A small convolutional embedding encoder with hand-derived gradients:
//! conv 3x3 (reflect pad) -> ReLU -> 2x2 mean-pool -> conv 3x3 -> ReLU ->
//! 2x2 mean-pool -> affine -> L2 normalization. Training runs in f32;
//! gradient checks instantiate the same code in f64.
//!
//! Batch evaluation is sample-parallel. Gradient reduction sums fixed-size
//! chunks sequentially and then folds the chunk results in order, so results
//! are bit-identical for any thread count.

pub mod gradcheck;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::num::{c, Scalar};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Samples per reduction chunk; fixed so the floating-point summation tree
/// does not depend on the thread count.
const REDUCE_CHUNK: usize = 16;

const NORM_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "tensor data length {} != shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Architecture constants of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub image_size: usize,
    pub channels: usize,
    pub conv1_out: usize,
    pub conv2_out: usize,
    pub kernel: usize,
    pub d_emb: usize,
    pub num_classes: usize,
}

impl EncoderArch {
    pub fn new(image_size: usize, channels: usize, num_classes: usize) -> Self {
        Self { image_size, channels, conv1_out: 8, conv2_out: 16, kernel: 3, d_emb: 64, num_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 4 != 0 || self.image_size < 8 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} must be a multiple of 4 (two 2x2 pools)",
                self.image_size
            )));
        }
        if self.kernel != 3 {
            return Err(Error::InvalidConfig("kernel must be 3".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    pub fn fc_in(&self) -> usize {
        self.conv2_out * (self.image_size / 4) * (self.image_size / 4)
    }
}

/// All trainable weights, including the margin-head class matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T = f32> {
    pub arch: EncoderArch,
    pub conv1_w: Tensor<T>,
    pub conv1_b: Tensor<T>,
    pub conv2_w: Tensor<T>,
    pub conv2_b: Tensor<T>,
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
    pub head: Tensor<T>,
}

/// One gradient tensor per parameter tensor.
pub type ParamGrads<T> = EncoderParams<T>;

pub const TENSOR_NAMES: [&str; 7] =
    ["conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b", "head"];

impl<T: Scalar> EncoderParams<T> {
    pub fn zeros(arch: EncoderArch) -> Self {
        let k = arch.kernel;
        Self {
            arch,
            conv1_w: Tensor::zeros(&[arch.conv1_out, arch.channels, k, k]),
            conv1_b: Tensor::zeros(&[arch.conv1_out]),
            conv2_w: Tensor::zeros(&[arch.conv2_out, arch.conv1_out, k, k]),
            conv2_b: Tensor::zeros(&[arch.conv2_out]),
            fc_w: Tensor::zeros(&[arch.fc_in(), arch.d_emb]),
            fc_b: Tensor::zeros(&[arch.d_emb]),
            head: Tensor::zeros(&[arch.num_classes, arch.d_emb]),
        }
    }

    /// Seeded random initialization scaled by fan-in.
    pub fn init(arch: EncoderArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(arch);
        let mut fill = |t: &mut Tensor<T>, std: f64| {
            for v in &mut t.data {
                *v = c::<T>(std * rng.sample::<f64, _>(StandardNormal));
            }
        };
        let k2 = (arch.kernel * arch.kernel) as f64;
        fill(&mut params.conv1_w, (2.0 / (arch.channels as f64 * k2)).sqrt());
        fill(&mut params.conv2_w, (2.0 / (arch.conv1_out as f64 * k2)).sqrt());
        fill(&mut params.fc_w, (1.0 / arch.fc_in() as f64).sqrt());
        fill(&mut params.head, 1.0);
        Ok(params)
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 7] {
        [
            ("conv1_w", &self.conv1_w),
            ("conv1_b", &self.conv1_b),
            ("conv2_w", &self.conv2_w),
            ("conv2_b", &self.conv2_b),
            ("fc_w", &self.fc_w),
            ("fc_b", &self.fc_b),
            ("head", &self.head),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 7] {
        [
            ("conv1_w", &mut self.conv1_w),
            ("conv1_b", &mut self.conv1_b),
            ("conv2_w", &mut self.conv2_w),
            ("conv2_b", &mut self.conv2_b),
            ("fc_w", &mut self.fc_w),
            ("fc_b", &mut self.fc_b),
            ("head", &mut self.head),
        ]
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U + Copy) -> EncoderParams<U> {
        EncoderParams {
            arch: self.arch,
            conv1_w: self.conv1_w.map(f),
            conv1_b: self.conv1_b.map(f),
            conv2_w: self.conv2_w.map(f),
            conv2_b: self.conv2_b.map(f),
            fc_w: self.fc_w.map(f),
            fc_b: self.fc_b.map(f),
            head: self.head.map(f),
        }
    }

    /// In-place `self += other * scale`, tensor by tensor.
    pub fn axpy(&mut self, other: &Self, scale: T) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y * scale;
            }
        }
    }
}

impl EncoderParams<f32> {
    pub fn to_f64(&self) -> EncoderParams<f64> {
        self.map(|v| v as f64)
    }
}

impl EncoderParams<f64> {
    pub fn to_f32(&self) -> EncoderParams<f32> {
        self.map(|v| v as f32)
    }
}

#[inline]
fn reflect(i: i64, len: i64) -> usize {
    if i < 0 {
        (-i) as usize
    } else if i >= len {
        (2 * (len - 1) - i) as usize
    } else {
        i as usize
    }
}

/// Reflect-pads each plane of `(channels, s, s)` by one pixel.
fn pad_planes<T: Scalar>(input: &[T], channels: usize, s: usize, out: &mut Vec<T>) {
    let p = s + 2;
    out.clear();
    out.resize(channels * p * p, T::zero());
    for ch in 0..channels {
        let plane = &input[ch * s * s..(ch + 1) * s * s];
        let dst = &mut out[ch * p * p..(ch + 1) * p * p];
        for y in 0..p {
            let sy = reflect(y as i64 - 1, s as i64);
            for x in 0..p {
                let sx = reflect(x as i64 - 1, s as i64);
                dst[y * p + x] = plane[sy * s + sx];
            }
        }
    }
}

/// Scatter-adds a padded-plane cotangent back to the unpadded input.
fn unpad_planes<T: Scalar>(d_padded: &[T], channels: usize, s: usize, d_input: &mut [T]) {
    let p = s + 2;
    for ch in 0..channels {
        let src = &d_padded[ch * p * p..(ch + 1) * p * p];
        let dst = &mut d_input[ch * s * s..(ch + 1) * s * s];
        for y in 0..p {
            let sy = reflect(y as i64 - 1, s as i64);
            for x in 0..p {
                let sx = reflect(x as i64 - 1, s as i64);
                dst[sy * s + sx] += src[y * p + x];
            }
        }
    }
}

/// 3x3 convolution over padded planes: `out[f] = bias[f] + sum_c w[f,c] * in[c]`.
fn conv_forward<T: Scalar>(
    padded: &[T],
    weights: &[T],
    bias: &[T],
    c_in: usize,
    f_out: usize,
    s: usize,
    out: &mut [T],
) {
    let p = s + 2;
    for f in 0..f_out {
        let out_plane = &mut out[f * s * s..(f + 1) * s * s];
        out_plane.fill(bias[f]);
        for ch in 0..c_in {
            let in_plane = &padded[ch * p * p..(ch + 1) * p * p];
            for ky in 0..3 {
                for kx in 0..3 {
                    let w = weights[((f * c_in + ch) * 3 + ky) * 3 + kx];
                    for y in 0..s {
                        let src = &in_plane[(y + ky) * p + kx..(y + ky) * p + kx + s];
                        let dst = &mut out_plane[y * s..y * s + s];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += w * v;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv_forward`]: accumulates weight/bias grads and writes the
/// padded-input cotangent.
#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    padded: &[T],
    weights: &[T],
    d_out: &[T],
    c_in: usize,
    f_out: usize,
    s: usize,
    d_weights: &mut [T],
    d_bias: &mut [T],
    d_padded: &mut [T],
) {
    let p = s + 2;
    d_padded.fill(T::zero());
    for f in 0..f_out {
        let d_plane = &d_out[f * s * s..(f + 1) * s * s];
        let mut bsum = T::zero();
        for &v in d_plane {
            bsum += v;
        }
        d_bias[f] += bsum;
        for ch in 0..c_in {
            let in_plane = &padded[ch * p * p..(ch + 1) * p * p];
            let d_in_plane = &mut d_padded[ch * p * p..(ch + 1) * p * p];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wi = ((f * c_in + ch) * 3 + ky) * 3 + kx;
                    let w = weights[wi];
                    let mut wg = T::zero();
                    for y in 0..s {
                        let src = &in_plane[(y + ky) * p + kx..(y + ky) * p + kx + s];
                        let dfo = &d_plane[y * s..y * s + s];
                        let dst = &mut d_in_plane[(y + ky) * p + kx..(y + ky) * p + kx + s];
                        for i in 0..s {
                            wg += dfo[i] * src[i];
                            dst[i] += w * dfo[i];
                        }
                    }
                    d_weights[wi] += wg;
                }
            }
        }
    }
}

fn mean_pool<T: Scalar>(input: &[T], channels: usize, s: usize, out: &mut [T]) {
    let h = s / 2;
    let quarter = c::<T>(0.25);
    for ch in 0..channels {
        let plane = &input[ch * s * s..(ch + 1) * s * s];
        let dst = &mut out[ch * h * h..(ch + 1) * h * h];
        for y in 0..h {
            for x in 0..h {
                let i = 2 * y * s + 2 * x;
                dst[y * h + x] =
                    (plane[i] + plane[i + 1] + plane[i + s] + plane[i + s + 1]) * quarter;
            }
        }
    }
}

fn mean_pool_backward<T: Scalar>(d_out: &[T], channels: usize, s: usize, d_in: &mut [T]) {
    let h = s / 2;
    let quarter = c::<T>(0.25);
    d_in.fill(T::zero());
    for ch in 0..channels {
        let d_plane = &d_out[ch * h * h..(ch + 1) * h * h];
        let dst = &mut d_in[ch * s * s..(ch + 1) * s * s];
        for y in 0..h {
            for x in 0..h {
                let g = d_plane[y * h + x] * quarter;
                let i = 2 * y * s + 2 * x;
                dst[i] += g;
                dst[i + 1] += g;
                dst[i + s] += g;
                dst[i + s + 1] += g;
            }
        }
    }
}

/// Per-sample activations kept for the backward pass.
pub(crate) struct SampleTrace<T> {
    padded1: Vec<T>,
    act1: Vec<T>,
    padded2: Vec<T>,
    act2: Vec<T>,
    pool2: Vec<T>,
    pre_norm: Vec<T>,
}

pub(crate) fn forward_single<T: Scalar>(params: &EncoderParams<T>, x: &[T], emb: &mut [T]) -> SampleTrace<T> {
    let arch = &params.arch;
    let s = arch.image_size;
    let s2 = s / 2;

    let mut padded1 = Vec::new();
    pad_planes(x, arch.channels, s, &mut padded1);
    let mut act1 = vec![T::zero(); arch.conv1_out * s * s];
    conv_forward(&padded1, &params.conv1_w.data, &params.conv1_b.data, arch.channels, arch.conv1_out, s, &mut act1);
    for v in &mut act1 {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    let mut pool1 = vec![T::zero(); arch.conv1_out * s2 * s2];
    mean_pool(&act1, arch.conv1_out, s, &mut pool1);

    let mut padded2 = Vec::new();
    pad_planes(&pool1, arch.conv1_out, s2, &mut padded2);
    let mut act2 = vec![T::zero(); arch.conv2_out * s2 * s2];
    conv_forward(&padded2, &params.conv2_w.data, &params.conv2_b.data, arch.conv1_out, arch.conv2_out, s2, &mut act2);
    for v in &mut act2 {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    let mut pool2 = vec![T::zero(); arch.fc_in()];
    mean_pool(&act2, arch.conv2_out, s2, &mut pool2);

    let d_emb = arch.d_emb;
    let mut pre_norm = params.fc_b.data.clone();
    for (i, &xi) in pool2.iter().enumerate() {
        let row = &params.fc_w.data[i * d_emb..(i + 1) * d_emb];
        for (o, &w) in pre_norm.iter_mut().zip(row) {
            *o += xi * w;
        }
    }

    let norm = pre_norm.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
    let denom = if norm < c(NORM_GUARD) { norm + c(NORM_GUARD) } else { norm };
    for (e, &v) in emb.iter_mut().zip(&pre_norm) {
        *e = v / denom;
    }
    debug_assert!(emb.iter().all(|v| v.is_finite()), "non-finite embedding");

    SampleTrace { padded1, act1, padded2, act2, pool2, pre_norm }
}

pub(crate) fn backward_single<T: Scalar>(
    params: &EncoderParams<T>,
    trace: &SampleTrace<T>,
    d_emb: &[T],
    grads: &mut ParamGrads<T>,
    d_x: &mut [T],
) {
    let arch = &params.arch;
    let s = arch.image_size;
    let s2 = s / 2;
    let d = arch.d_emb;

    // Normalization: emb = pre / denom with denom = ||pre|| (guarded near 0).
    let norm = trace.pre_norm.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
    let denom = if norm < c(NORM_GUARD) { norm + c(NORM_GUARD) } else { norm };
    let dot = trace.pre_norm.iter().zip(d_emb).fold(T::zero(), |acc, (&p, &g)| acc + p * g);
    let mut d_pre = vec![T::zero(); d];
    for i in 0..d {
        let through = d_emb[i] / denom;
        let radial = if norm > T::zero() {
            trace.pre_norm[i] * dot / (norm * denom * denom)
        } else {
            T::zero()
        };
        d_pre[i] = through - radial;
    }

    // Affine layer.
    let mut d_pool2 = vec![T::zero(); arch.fc_in()];
    for (i, dst) in d_pool2.iter_mut().enumerate() {
        let row = &params.fc_w.data[i * d..(i + 1) * d];
        let grow = &mut grads.fc_w.data[i * d..(i + 1) * d];
        let xi = trace.pool2[i];
        let mut acc = T::zero();
        for j in 0..d {
            acc += row[j] * d_pre[j];
            grow[j] += xi * d_pre[j];
        }
        *dst = acc;
    }
    for (gb, &g) in grads.fc_b.data.iter_mut().zip(&d_pre) {
        *gb += g;
    }

    // Second block.
    let mut d_act2 = vec![T::zero(); arch.conv2_out * s2 * s2];
    mean_pool_backward(&d_pool2, arch.conv2_out, s2, &mut d_act2);
    for (g, &a) in d_act2.iter_mut().zip(&trace.act2) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
    let mut d_padded2 = vec![T::zero(); trace.padded2.len()];
    conv_backward(
        &trace.padded2,
        &params.conv2_w.data,
        &d_act2,
        arch.conv1_out,
        arch.conv2_out,
        s2,
        &mut grads.conv2_w.data,
        &mut grads.conv2_b.data,
        &mut d_padded2,
    );
    let mut d_pool1 = vec![T::zero(); arch.conv1_out * s2 * s2];
    unpad_planes(&d_padded2, arch.conv1_out, s2, &mut d_pool1);

    // First block.
    let mut d_act1 = vec![T::zero(); arch.conv1_out * s * s];
    mean_pool_backward(&d_pool1, arch.conv1_out, s, &mut d_act1);
    for (g, &a) in d_act1.iter_mut().zip(&trace.act1) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
    let mut d_padded1 = vec![T::zero(); trace.padded1.len()];
    conv_backward(
        &trace.padded1,
        &params.conv1_w.data,
        &d_act1,
        arch.channels,
        arch.conv1_out,
        s,
        &mut grads.conv1_w.data,
        &mut grads.conv1_b.data,
        &mut d_padded1,
    );
    d_x.fill(T::zero());
    unpad_planes(&d_padded1, arch.channels, s, d_x);
}

fn check_batch_shape<T: Scalar>(arch: &EncoderArch, batch: &Tensor<T>) -> Result<usize> {
    let s = arch.image_size;
    if batch.shape.len() != 4 || batch.shape[1] != arch.channels || batch.shape[2] != s || batch.shape[3] != s {
        return Err(Error::ShapeMismatch(format!(
            "batch shape {:?}, expected [B, {}, {}, {}]",
            batch.shape, arch.channels, s, s
        )));
    }
    Ok(batch.shape[0])
}

/// Embeds a batch. Output rows are unit-norm (zero-feature inputs fall back
/// to the guarded all-zero row).
pub fn forward<T: Scalar>(params: &EncoderParams<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    params.arch.validate()?;
    let b = check_batch_shape(&params.arch, batch)?;
    let sample = params.arch.channels * params.arch.image_size * params.arch.image_size;
    let d = params.arch.d_emb;
    let mut out = Tensor::zeros(&[b, d]);
    out.data
        .par_chunks_mut(d)
        .zip(batch.data.par_chunks(sample))
        .for_each(|(emb, x)| {
            forward_single(params, x, emb);
        });
    debug_assert!(out.all_finite(), "non-finite embeddings");
    Ok(out)
}

/// Full reverse pass: parameter gradients plus the cotangent with respect to
/// the input batch, for the embedding cotangent `d_embeddings`.
pub fn backward<T: Scalar>(
    params: &EncoderParams<T>,
    batch: &Tensor<T>,
    d_embeddings: &Tensor<T>,
) -> Result<(ParamGrads<T>, Tensor<T>)> {
    params.arch.validate()?;
    let b = check_batch_shape(&params.arch, batch)?;
    let d = params.arch.d_emb;
    if d_embeddings.shape != [b, d] {
        return Err(Error::ShapeMismatch(format!(
            "cotangent shape {:?}, expected [{}, {}]",
            d_embeddings.shape, b, d
        )));
    }
    let sample = params.arch.channels * params.arch.image_size * params.arch.image_size;
    let mut d_batch = Tensor::zeros(&batch.shape);

    // Chunked deterministic reduction over samples.
    let chunk_grads: Vec<ParamGrads<T>> = batch
        .data
        .par_chunks(REDUCE_CHUNK * sample)
        .zip(d_embeddings.data.par_chunks(REDUCE_CHUNK * d))
        .zip(d_batch.data.par_chunks_mut(REDUCE_CHUNK * sample))
        .map(|((xs, gs), dxs)| {
            let mut grads = ParamGrads::zeros(params.arch);
            let mut emb = vec![T::zero(); d];
            for ((x, g), dx) in
                xs.chunks(sample).zip(gs.chunks(d)).zip(dxs.chunks_mut(sample))
            {
                let trace = forward_single(params, x, &mut emb);
                backward_single(params, &trace, g, &mut grads, dx);
            }
            grads
        })
        .collect();

    let mut total = ParamGrads::zeros(params.arch);
    for g in &chunk_grads {
        total.axpy(g, T::one());
    }
    debug_assert!(total.tensors().iter().all(|(_, t)| t.all_finite()), "non-finite gradients");
    Ok((total, d_batch))
}

/// Sign pattern of every ReLU in a forward pass; finite-difference checks
/// use it to recognize probes that straddle an activation kink.
pub fn relu_signature<T: Scalar>(params: &EncoderParams<T>, batch: &Tensor<T>) -> Result<Vec<bool>> {
    params.arch.validate()?;
    let b = check_batch_shape(&params.arch, batch)?;
    let sample = params.arch.channels * params.arch.image_size * params.arch.image_size;
    let mut signature = Vec::new();
    let mut emb = vec![T::zero(); params.arch.d_emb];
    for i in 0..b {
        let trace = forward_single(params, &batch.data[i * sample..(i + 1) * sample], &mut emb);
        signature.extend(trace.act1.iter().map(|&v| v > T::zero()));
        signature.extend(trace.act2.iter().map(|&v| v > T::zero()));
    }
    Ok(signature)
}

/// Packs HWC images into a CHW batch tensor.
pub fn images_to_batch<T: Scalar>(images: &[&Image<T>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
    let (h, w, ch) = (first.height, first.width, first.channels);
    let mut out = Tensor::zeros(&[images.len(), ch, h, w]);
    for (b, img) in images.iter().enumerate() {
        if img.height != h || img.width != w || img.channels != ch {
            return Err(Error::ShapeMismatch("batch images differ in shape".into()));
        }
        let base = b * ch * h * w;
        for y in 0..h {
            for x in 0..w {
                for c0 in 0..ch {
                    out.data[base + c0 * h * w + y * w + x] = img.get(y, x, c0);
                }
            }
        }
    }
    Ok(out)
}

/// Unpacks a CHW cotangent row back into an HWC image gradient.
pub fn batch_grad_to_image<T: Scalar>(d_batch: &Tensor<T>, index: usize) -> Image<T> {
    let (ch, h, w) = (d_batch.shape[1], d_batch.shape[2], d_batch.shape[3]);
    let base = index * ch * h * w;
    let mut img = Image::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c0 in 0..ch {
                img.set(y, x, c0, d_batch.data[base + c0 * h * w + y * w + x]);
            }
        }
    }
    img
}

/// Writes all tensors in declared order as little-endian f32.
pub fn write_weights(params: &EncoderParams<f32>, path: &std::path::Path) -> Result<()> {
    let mut bytes = Vec::new();
    for (_, t) in params.tensors() {
        for &v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads tensors in declared order into a zeroed parameter set.
pub fn read_weights(arch: EncoderArch, path: &std::path::Path) -> Result<EncoderParams<f32>> {
    let bytes = std::fs::read(path)?;
    let mut params = EncoderParams::zeros(arch);
    let total: usize = params.tensors().iter().map(|(_, t)| t.len()).sum();
    if bytes.len() != total * 4 {
        return Err(Error::Format(format!(
            "weights file has {} bytes, expected {}",
            bytes.len(),
            total * 4
        )));
    }
    let mut offset = 0;
    for (_, t) in params.tensors_mut() {
        for v in &mut t.data {
            *v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
            offset += 4;
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> EncoderArch {
        EncoderArch::new(8, 3, 4)
    }

    fn random_batch(arch: &EncoderArch, b: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(&[b, arch.channels, arch.image_size, arch.image_size]);
        for v in &mut t.data {
            *v = rng.gen_range(0.0..1.0);
        }
        t
    }

    #[test]
    fn rows_are_unit_norm() {
        let arch = tiny_arch();
        let params = EncoderParams::<f64>::init(arch, 0).unwrap();
        let batch = random_batch(&arch, 5, 1);
        let emb = forward(&params, &batch).unwrap();
        for row in emb.data.chunks(arch.d_emb) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5, "norm {n}");
        }
    }

    #[test]
    fn zero_image_zero_bias_hits_guard() {
        let arch = tiny_arch();
        let mut params = EncoderParams::<f64>::init(arch, 0).unwrap();
        params.conv1_b.data.fill(0.0);
        params.conv2_b.data.fill(0.0);
        params.fc_b.data.fill(0.0);
        let batch = Tensor::zeros(&[1, 3, 8, 8]);
        let emb = forward(&params, &batch).unwrap();
        assert!(emb.data.iter().all(|v| v.is_finite()));
        assert!(emb.data.iter().all(|&v| v == 0.0), "guard should return zeros");
    }

    #[test]
    fn duplicate_images_share_embeddings() {
        let arch = tiny_arch();
        let params = EncoderParams::<f64>::init(arch, 3).unwrap();
        let one = random_batch(&arch, 1, 9);
        let mut two = Tensor::zeros(&[2, 3, 8, 8]);
        two.data[..one.data.len()].copy_from_slice(&one.data);
        two.data[one.data.len()..].copy_from_slice(&one.data);
        let emb = forward(&params, &two).unwrap();
        let (a, b) = emb.data.split_at(arch.d_emb);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_cotangent_zero_grads() {
        let arch = tiny_arch();
        let params = EncoderParams::<f64>::init(arch, 5).unwrap();
        let batch = random_batch(&arch, 3, 5);
        let d_emb = Tensor::zeros(&[3, arch.d_emb]);
        let (grads, d_in) = backward(&params, &batch, &d_emb).unwrap();
        assert!(grads.tensors().iter().all(|(_, t)| t.data.iter().all(|&v| v == 0.0)));
        assert!(d_in.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cotangent_parallel_to_embedding_is_killed() {
        let arch = tiny_arch();
        let params = EncoderParams::<f64>::init(arch, 7).unwrap();
        let batch = random_batch(&arch, 1, 7);
        let emb = forward(&params, &batch).unwrap();
        let (grads, d_in) = backward(&params, &batch, &emb).unwrap();
        for (_, t) in grads.tensors() {
            for &v in &t.data {
                assert!(v.abs() < 1e-12, "projection should kill parallel cotangent: {v}");
            }
        }
        assert!(d_in.data.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn forward_backward_bit_deterministic() {
        let arch = tiny_arch();
        let params = EncoderParams::<f64>::init(arch, 2).unwrap();
        let batch = random_batch(&arch, 33, 6); // odd count exercises partial chunks
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut d_emb = Tensor::zeros(&[33, arch.d_emb]);
        for v in &mut d_emb.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        let e1 = forward(&params, &batch).unwrap();
        let e2 = forward(&params, &batch).unwrap();
        assert_eq!(e1, e2);
        let (g1, di1) = backward(&params, &batch, &d_emb).unwrap();
        let (g2, di2) = backward(&params, &batch, &d_emb).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(di1, di2);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let arch = tiny_arch();
        let params = EncoderParams::<f64>::init(arch, 2).unwrap();
        let batch = random_batch(&arch, 40, 4);
        let mut d_emb = Tensor::zeros(&[40, arch.d_emb]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in &mut d_emb.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let r1 = pool1.install(|| backward(&params, &batch, &d_emb).unwrap());
        let r4 = pool4.install(|| backward(&params, &batch, &d_emb).unwrap());
        assert_eq!(r1.0, r4.0);
        assert_eq!(r1.1, r4.1);
    }

    #[test]
    fn batch_shape_rejected() {
        let arch = tiny_arch();
        let params = EncoderParams::<f64>::init(arch, 0).unwrap();
        let bad = Tensor::<f64>::zeros(&[1, 3, 8, 12]);
        assert!(forward(&params, &bad).is_err());
    }

    #[test]
    fn weights_round_trip() {
        let arch = tiny_arch();
        let params = EncoderParams::<f32>::init(arch, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.f32");
        write_weights(&params, &path).unwrap();
        let back = read_weights(arch, &path).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn image_batch_round_trip() {
        let mut img: Image<f64> = Image::zeros(8, 8, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f64 / 200.0;
        }
        let batch = images_to_batch(&[&img]).unwrap();
        assert_eq!(batch.shape, vec![1, 3, 8, 8]);
        assert_eq!(batch.data[0 * 64 + 0], img.get(0, 0, 0));
        assert_eq!(batch.data[2 * 64 + 9], img.get(1, 1, 2));
        let back = batch_grad_to_image(&batch, 0);
        assert_eq!(back, img);
    }
}
