//! The training cost and its gradients.
//!
//! For a batch B of frame indices the cost is
//!
//! ```text
//! total = data(batch) + lambda1 * distance(batch) + lambda2 * latent(all frames)
//! ```
//!
//! where the data term compares generated images against the measured
//! k-space (exactly, or through the cached gridding targets and Toeplitz
//! operators), the distance term penalizes the generator's sensitivity to
//! its latent input, and the latent term is the squared forward-difference
//! energy of the whole latent trajectory. The latent term is always taken
//! over all frames: it costs O(M) scalars, and restricting it to a batch
//! would distort the stencil at batch boundaries.
//!
//! Everything here is stateless: callers pass the generator, latents and
//! frames in, and get values plus gradients (with respect to every layer and
//! every latent) back.

use crate::diffops::Batch;
use crate::generator::{
    backward_batch, forward_batch, forward_values, jacobian_frobenius_sq, ComplexImage,
    GeneratorParams, ParamGrads,
};
use crate::kspace::{ndft_adjoint, ndft_forward, quadrature_scale, CoilMaps, KSpaceFrame};
use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;

/// Step used by the central-difference Jacobian surrogate during training.
pub const DEFAULT_JACOBIAN_STEP: f64 = 1e-3;

/// Which data term to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Residual against the raw samples through the exact forward model.
    Exact,
    /// Residual against the gridding target through the Toeplitz operator.
    Approx,
}

/// One evaluation of the cost, split into its labeled parts.
#[derive(Clone, Copy, Debug, Default)]
pub struct CostBreakdown {
    pub data: f64,
    pub distance: f64,
    pub latent: f64,
    pub total: f64,
    /// frames that contributed to the data and distance terms
    pub n_terms: usize,
}

fn batch_latents(z: ArrayView2<f64>, batch: &[usize]) -> Array2<f64> {
    let l = z.ncols();
    let mut out = Array2::zeros((batch.len(), l));
    for (row, &i) in batch.iter().enumerate() {
        assert!(i < z.nrows(), "batch index {i} out of range");
        for j in 0..l {
            out[[row, j]] = z[[i, j]];
        }
    }
    out
}

fn image_from_slice(out: &Batch, b: usize) -> ComplexImage {
    let n = out.h;
    let n2 = n * n;
    let re = out.data.row(0);
    let im = out.data.row(1);
    let mut img = ComplexImage::zeros(n);
    for (i, v) in img.values.iter_mut().enumerate() {
        *v = Complex64::new(re[b * n2 + i], im[b * n2 + i]);
    }
    img
}

fn add_cotangent(cot: &mut Batch, b: usize, img: &ComplexImage) {
    let n2 = img.n() * img.n();
    let (mut re_row, mut im_row) = cot.data.multi_slice_mut((ndarray::s![0, ..], ndarray::s![1, ..]));
    for (i, v) in img.values.iter().enumerate() {
        re_row[b * n2 + i] += v.re;
        im_row[b * n2 + i] += v.im;
    }
}

fn scatter_latent_grads(d_full: &mut Array2<f64>, batch: &[usize], d_batch: &Array2<f64>) {
    for (row, &i) in batch.iter().enumerate() {
        for j in 0..d_full.ncols() {
            d_full[[i, j]] += d_batch[[row, j]];
        }
    }
}

/// Mean over the batch of ||A_i G(z_i) - b_i||^2 / S_i, with gradients.
pub fn data_loss_exact(
    params: &GeneratorParams,
    z: ArrayView2<f64>,
    frames: &[KSpaceFrame],
    coils: &CoilMaps,
    batch: &[usize],
) -> (f64, ParamGrads, Array2<f64>) {
    assert!(!batch.is_empty(), "empty batch");
    let nb = batch.len() as f64;
    let tape = forward_batch(params, batch_latents(z, batch).view());
    let mut value = 0.0;
    let mut cot = Batch::zeros(2, batch.len(), tape.output.h, tape.output.w);
    for (bi, &fi) in batch.iter().enumerate() {
        let frame = &frames[fi];
        let img = image_from_slice(&tape.output, bi);
        let mut resid = ndft_forward(&img, coils, &frame.trajectory);
        resid.zip_mut_with(&frame.samples, |r, &b| *r -= b);
        let s = frame.sample_count() as f64;
        value += resid.iter().map(|v| v.norm_sqr()).sum::<f64>() / s / nb;
        let mut back = ndft_adjoint(&resid, coils, &frame.trajectory);
        let scale = 2.0 / (s * nb);
        back.values.mapv_inplace(|v| v * scale);
        add_cotangent(&mut cot, bi, &back);
    }
    let (grads, d_batch) = backward_batch(params, &tape, &cot);
    let mut d_z = Array2::zeros(z.dim());
    scatter_latent_grads(&mut d_z, batch, &d_batch);
    (value, grads, d_z)
}

/// Mean over the batch of ||s P_i G(z_i) - g_i||^2 / N^2, where P_i is the
/// Toeplitz-embedded weighted normal operator, g_i the cached gridding
/// target, and s the quadrature scale that also built g_i. P is
/// self-adjoint, so the backward pass reuses it on the residual.
pub fn data_loss_approx(
    params: &GeneratorParams,
    z: ArrayView2<f64>,
    frames: &[KSpaceFrame],
    coils: &CoilMaps,
    batch: &[usize],
) -> (f64, ParamGrads, Array2<f64>) {
    assert!(!batch.is_empty(), "empty batch");
    let nb = batch.len() as f64;
    let tape = forward_batch(params, batch_latents(z, batch).view());
    let n = tape.output.h;
    let n2 = (n * n) as f64;
    let mut value = 0.0;
    let mut cot = Batch::zeros(2, batch.len(), n, n);
    for (bi, &fi) in batch.iter().enumerate() {
        let frame = &frames[fi];
        let scale = quadrature_scale(frame.sample_count());
        let img = image_from_slice(&tape.output, bi);
        let target = frame.gridding(coils);
        let mut resid = frame.normal_apply(coils, &img);
        ndarray::azip!((r in &mut resid.values, &g in &target.values) *r = *r * scale - g);
        value += resid.values.iter().map(|v| v.norm_sqr()).sum::<f64>() / n2 / nb;
        let mut back = frame.normal_apply(coils, &resid);
        let factor = 2.0 * scale / (n2 * nb);
        back.values.mapv_inplace(|v| v * factor);
        add_cotangent(&mut cot, bi, &back);
    }
    let (grads, d_batch) = backward_batch(params, &tape, &cot);
    let mut d_z = Array2::zeros(z.dim());
    scatter_latent_grads(&mut d_z, batch, &d_batch);
    (value, grads, d_z)
}

/// Squared forward-difference energy of the latent trajectory:
/// sum_t ||z_{t+1} - z_t||^2, with its exact gradient.
pub fn latent_reg(z: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let m = z.nrows();
    let l = z.ncols();
    let mut value = 0.0;
    let mut grad = Array2::zeros(z.dim());
    if m < 2 {
        return (value, grad);
    }
    for t in 0..m - 1 {
        for j in 0..l {
            let d = z[[t + 1, j]] - z[[t, j]];
            value += d * d;
            grad[[t + 1, j]] += 2.0 * d;
            grad[[t, j]] -= 2.0 * d;
        }
    }
    (value, grad)
}

/// Mean over the batch of the central-difference Jacobian energy
/// sum_j ||G(z + h e_j) - G(z - h e_j)||^2 / (2h)^2, differentiated through
/// the displaced forward passes with respect to both the weights and the
/// latents.
pub fn distance_reg(
    params: &GeneratorParams,
    z: ArrayView2<f64>,
    batch: &[usize],
    h: f64,
) -> (f64, ParamGrads, Array2<f64>) {
    assert!(!batch.is_empty(), "empty batch");
    assert!(h > 0.0);
    let l = z.ncols();
    let nb = batch.len();
    // rows: for each batch frame, for each latent axis, the + and - probes
    let mut latents = Array2::zeros((nb * 2 * l, l));
    for (bi, &fi) in batch.iter().enumerate() {
        for j in 0..l {
            for axis in 0..l {
                let base = z[[fi, axis]];
                latents[[(bi * l + j) * 2, axis]] = base;
                latents[[(bi * l + j) * 2 + 1, axis]] = base;
            }
            latents[[(bi * l + j) * 2, j]] += h;
            latents[[(bi * l + j) * 2 + 1, j]] -= h;
        }
    }
    let tape = forward_batch(params, latents.view());
    let n2 = tape.output.h * tape.output.w;
    let denom = 4.0 * h * h * nb as f64;
    let mut value = 0.0;
    let mut cot = Batch::zeros(2, nb * 2 * l, tape.output.h, tape.output.w);
    {
        let out = &tape.output.data;
        let mut cd = cot.data.view_mut();
        for pair in 0..nb * l {
            let p = 2 * pair * n2;
            let q = (2 * pair + 1) * n2;
            for ch in 0..2 {
                let row = out.row(ch);
                let mut crow = cd.row_mut(ch);
                for i in 0..n2 {
                    let d = row[p + i] - row[q + i];
                    value += d * d / denom;
                    crow[p + i] = 2.0 * d / denom;
                    crow[q + i] = -2.0 * d / denom;
                }
            }
        }
    }
    let (grads, d_disp) = backward_batch(params, &tape, &cot);
    let mut d_z = Array2::zeros(z.dim());
    for (bi, &fi) in batch.iter().enumerate() {
        for j in 0..l {
            for axis in 0..l {
                d_z[[fi, axis]] +=
                    d_disp[[(bi * l + j) * 2, axis]] + d_disp[[(bi * l + j) * 2 + 1, axis]];
            }
        }
    }
    (value, grads, d_z)
}

/// Assemble the full cost and its gradients for one batch.
#[allow(clippy::too_many_arguments)]
pub fn total_cost(
    params: &GeneratorParams,
    z: ArrayView2<f64>,
    frames: &[KSpaceFrame],
    coils: &CoilMaps,
    batch: &[usize],
    lambda1: f64,
    lambda2: f64,
    mode: LossMode,
) -> (CostBreakdown, ParamGrads, Array2<f64>) {
    assert!(lambda1 >= 0.0 && lambda2 >= 0.0);
    let (data, mut grads, mut d_z) = match mode {
        LossMode::Exact => data_loss_exact(params, z, frames, coils, batch),
        LossMode::Approx => data_loss_approx(params, z, frames, coils, batch),
    };
    let mut distance = 0.0;
    if lambda1 > 0.0 {
        let (dv, dg, dz) = distance_reg(params, z, batch, DEFAULT_JACOBIAN_STEP);
        distance = dv;
        grads.scaled_add(lambda1, &dg);
        d_z.scaled_add(lambda1, &dz);
    }
    let (latent, lz) = latent_reg(z);
    if lambda2 > 0.0 {
        d_z.scaled_add(lambda2, &lz);
    }
    let breakdown = CostBreakdown {
        data,
        distance,
        latent,
        total: data + lambda1 * distance + lambda2 * latent,
        n_terms: batch.len(),
    };
    (breakdown, grads, d_z)
}

/// Cost evaluation without gradients (for logging and schedules).
#[allow(clippy::too_many_arguments)]
pub fn total_cost_value(
    params: &GeneratorParams,
    z: ArrayView2<f64>,
    frames: &[KSpaceFrame],
    coils: &CoilMaps,
    batch: &[usize],
    lambda1: f64,
    lambda2: f64,
    mode: LossMode,
) -> CostBreakdown {
    assert!(!batch.is_empty(), "empty batch");
    let nb = batch.len() as f64;
    let out = forward_values(params, batch_latents(z, batch).view());
    let n2 = (out.h * out.w) as f64;
    let mut data = 0.0;
    for (bi, &fi) in batch.iter().enumerate() {
        let frame = &frames[fi];
        let img = image_from_slice(&out, bi);
        match mode {
            LossMode::Exact => {
                let mut resid = ndft_forward(&img, coils, &frame.trajectory);
                resid.zip_mut_with(&frame.samples, |r, &b| *r -= b);
                data += resid.iter().map(|v| v.norm_sqr()).sum::<f64>()
                    / frame.sample_count() as f64
                    / nb;
            }
            LossMode::Approx => {
                let scale = quadrature_scale(frame.sample_count());
                let target = frame.gridding(coils);
                let mut resid = frame.normal_apply(coils, &img);
                ndarray::azip!((r in &mut resid.values, &g in &target.values) *r = *r * scale - g);
                data += resid.values.iter().map(|v| v.norm_sqr()).sum::<f64>() / n2 / nb;
            }
        }
    }
    let mut distance = 0.0;
    if lambda1 > 0.0 {
        for &fi in batch {
            let zi: Vec<f64> = z.row(fi).to_vec();
            distance += jacobian_frobenius_sq(params, &zi, DEFAULT_JACOBIAN_STEP) / nb;
        }
    }
    let (latent, _) = latent_reg(z);
    CostBreakdown {
        data,
        distance,
        latent,
        total: data + lambda1 * distance + lambda2 * latent,
        n_terms: batch.len(),
    }
}
