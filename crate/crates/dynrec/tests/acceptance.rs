//! Release gate: nine numbered go/no-go checks covering operator
//! correctness, gradients, the latent-path bound, trainer sanity, and the
//! end-to-end phantom targets. Each check prints one PASS/FAIL line with the
//! measured numbers (straight to stdout so the capturing harness cannot eat
//! it) and then asserts.
//!
//! The phantom checks share their expensive training runs through lazy
//! statics; with the default single-threaded execution the checks run in
//! numeric order, so criterion 5 pays for the seed-1 run and criteria 6/7
//! reuse it.

use dynrec::config::RunConfig;
use dynrec::container::{read_checkpoint, read_dataset, write_checkpoint, write_dataset};
use dynrec::diffops::{
    conv_transpose2d_batch, conv_transpose2d_vjp_batch, init_layer, leaky_relu, leaky_relu_vjp,
    tanh_act, tanh_act_vjp, Batch, LayerWeights, Tensor,
};
use dynrec::generator::{
    build_generator, generate_batch, jacobian_frobenius_sq, path_length, ComplexImage,
    GeneratorParams, Preset,
};
use dynrec::kspace::{
    density_weights, ndft_adjoint, ndft_forward, toeplitz_apply,
    toeplitz_spectrum, CoilMaps, Trajectory,
};
use dynrec::metrics::{latent_alignment, ser};
use dynrec::objective::{
    data_loss_approx, data_loss_exact, distance_reg, latent_reg, total_cost_value, LossMode,
};
use dynrec::phantom::{acquire, simulate_coilmaps, Dataset, PhantomConfig};
use dynrec::trainer::{
    train, LevelConfig, LossModePolicy, Schedule, TrainConfig, TrainEvent,
};
use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::io::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

// pinned tolerances and targets, one place
const TOL_NDFT_VS_DENSE: f64 = 1e-12;
const TOL_ADJOINT: f64 = 1e-12;
const TOL_TOEPLITZ: f64 = 1e-10;
const TOL_GRAD_PRIMITIVE: f64 = 1e-4;
const TOL_GRAD_END_TO_END: f64 = 1e-3;
const PATH_BOUND_SLACK: f64 = 1.05;
const TOL_PLANTED_COST: f64 = 1e-10;
const TOL_PLANTED_DRIFT: f64 = 1e-6;
const MARGIN_DB: f64 = 3.0;
const ALIGNMENT_MIN: f64 = 0.7;
const ABLATION_DROP_DB: f64 = 1.0;
const REG_FINAL_WINDOW_DB: f64 = 0.5;
const SPEEDUP_RATIO: f64 = 0.5;
const TOL_SER_REPRO_DB: f64 = 1e-9;
const BUDGET_OPERATORS_SECS: f64 = 60.0;
const BUDGET_GRADIENTS_SECS: f64 = 300.0;
const BUDGET_PATH_SECS: f64 = 120.0;
const BUDGET_END_TO_END_SECS: f64 = 1800.0;

fn verdict(idx: usize, name: &str, ok: bool, detail: &str) {
    let line = format!(
        "[{}] criterion {idx} ({name}): {detail}\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(ok, "criterion {idx} ({name}): {detail}");
}

fn rel_err_c(a: &[Complex64], b: &[Complex64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm_sqr())
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    num / den
}

fn rel_err_r(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    num / den
}

fn random_image(n: usize, rng: &mut ChaCha12Rng) -> ComplexImage {
    let mut img = ComplexImage::zeros(n);
    for v in img.values.iter_mut() {
        *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    }
    img
}

fn random_traj(s: usize, rng: &mut ChaCha12Rng) -> Trajectory {
    let mut coords = Array2::zeros((s, 2));
    for v in coords.iter_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    Trajectory::new(coords).unwrap()
}

/// Brute-force s_c(k) = sum_r coil_c(r) image(r) exp(-i 2 pi k.r), the
/// definition the fast factorized path must reproduce.
fn dense_ndft(image: &ComplexImage, coils: &CoilMaps, traj: &Trajectory) -> Array2<Complex64> {
    let n = image.n();
    let s = traj.len();
    let half = (n / 2) as f64;
    let mut out = Array2::zeros((coils.coils(), s));
    for c in 0..coils.coils() {
        for si in 0..s {
            let kx = traj.coords[[si, 0]];
            let ky = traj.coords[[si, 1]];
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let ry = y as f64 - half;
                    let rx = x as f64 - half;
                    let phase = -2.0 * std::f64::consts::PI * (kx * rx + ky * ry);
                    acc += coils.maps[[c, y, x]]
                        * image.values[[y, x]]
                        * Complex64::from_polar(1.0, phase);
                }
            }
            out[[c, si]] = acc;
        }
    }
    out
}

#[test]
fn criterion_1_operator_oracles() {
    let started = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(101);

    // forward vs dense definition, N = 16
    let n = 16;
    let coils = simulate_coilmaps(3, n, 5);
    let img = random_image(n, &mut rng);
    let traj = random_traj(40, &mut rng);
    let fast = ndft_forward(&img, &coils, &traj);
    let dense = dense_ndft(&img, &coils, &traj);
    let fwd_err = rel_err_c(fast.as_slice().unwrap(), dense.as_slice().unwrap());

    // adjoint identity <A x, y> = <x, A^H y>
    let y: Vec<Complex64> = (0..fast.len())
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let y2 = Array2::from_shape_vec(fast.dim(), y).unwrap();
    let lhs: Complex64 = fast
        .iter()
        .zip(y2.iter())
        .map(|(a, b)| a * b.conj())
        .sum();
    let back = ndft_adjoint(&y2, &coils, &traj);
    let rhs: Complex64 = img
        .values
        .iter()
        .zip(back.values.iter())
        .map(|(a, b)| a * b.conj())
        .sum();
    let adj_err = (lhs - rhs).norm() / rhs.norm();

    // Toeplitz fast path vs literal A^H W A composition, N = 32
    let n2 = 32;
    let coils2 = simulate_coilmaps(4, n2, 6);
    let img2 = random_image(n2, &mut rng);
    let traj2 = dynrec::phantom::golden_angle_trajectory(0, 6, 2 * n2);
    let w = density_weights(&traj2).unwrap();
    let spec = toeplitz_spectrum(&traj2, &w, n2);
    let fast_normal = toeplitz_apply(&spec, &coils2, &img2);
    let mut sampled = ndft_forward(&img2, &coils2, &traj2);
    for c in 0..coils2.coils() {
        for s in 0..traj2.len() {
            sampled[[c, s]] *= w[s];
        }
    }
    let literal = ndft_adjoint(&sampled, &coils2, &traj2);
    let toep_err = rel_err_c(
        fast_normal.values.as_slice().unwrap(),
        literal.values.as_slice().unwrap(),
    );

    let secs = started.elapsed().as_secs_f64();
    let ok = fwd_err < TOL_NDFT_VS_DENSE
        && adj_err < TOL_ADJOINT
        && toep_err < TOL_TOEPLITZ
        && secs < BUDGET_OPERATORS_SECS;
    verdict(
        1,
        "operator oracles",
        ok,
        &format!(
            "ndft vs dense {fwd_err:.2e} (<{TOL_NDFT_VS_DENSE:.0e}), adjoint {adj_err:.2e} \
             (<{TOL_ADJOINT:.0e}), toeplitz vs composition {toep_err:.2e} (<{TOL_TOEPLITZ:.0e}), \
             {secs:.1}s (<{BUDGET_OPERATORS_SECS:.0}s)"
        ),
    );
}

/// Central finite difference of a scalar function over one slot.
fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[test]
fn criterion_2_gradient_suite() {
    let started = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(202);
    let mut worst_primitive = 0.0f64;

    // transposed convolution: input, kernel and bias gradients against FD
    // of the scalar probe <cot, conv(x, w)>
    let w = init_layer(3, 2, 3, 2, 1, &mut rng);
    let mut x = Batch::zeros(3, 2, 4, 4);
    for v in x.data.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let out = conv_transpose2d_batch(&x, &w);
    let mut cot = Batch::zeros(out.channels(), out.batch, out.h, out.w);
    for v in cot.data.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let probe = |x: &Batch, w: &LayerWeights| -> f64 {
        conv_transpose2d_batch(x, w)
            .data
            .iter()
            .zip(cot.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    };
    let (dx, dk, db) = conv_transpose2d_vjp_batch(&x, &w, &cot);
    let h = 1e-5;
    // every kernel weight, every bias slot, and a spread of input slots
    let mut fd_k = dk.clone();
    for idx in 0..w.kernel.len() {
        let mut wp = w.clone();
        let base = wp.kernel.as_slice().unwrap()[idx];
        let f = |v: f64, wp: &mut LayerWeights| {
            wp.kernel.as_slice_mut().unwrap()[idx] = v;
            probe(&x, wp)
        };
        fd_k.as_slice_mut().unwrap()[idx] =
            (f(base + h, &mut wp) - f(base - h, &mut wp)) / (2.0 * h);
    }
    worst_primitive = worst_primitive.max(rel_err_r(
        dk.as_slice().unwrap(),
        fd_k.as_slice().unwrap(),
    ));
    let mut fd_b = db.clone();
    for idx in 0..w.bias.len() {
        let mut wp = w.clone();
        let base = wp.bias[idx];
        let mut f = |v: f64| {
            wp.bias[idx] = v;
            probe(&x, &wp)
        };
        fd_b[idx] = central_diff(&mut f, base, h);
    }
    worst_primitive =
        worst_primitive.max(rel_err_r(db.as_slice().unwrap(), fd_b.as_slice().unwrap()));
    let mut fd_x = dx.data.clone();
    for idx in 0..x.data.len() {
        let base = x.data.as_slice().unwrap()[idx];
        let mut f = |v: f64| {
            let mut xp = x.clone();
            xp.data.as_slice_mut().unwrap()[idx] = v;
            probe(&xp, &w)
        };
        fd_x.as_slice_mut().unwrap()[idx] = central_diff(&mut f, base, h);
    }
    worst_primitive = worst_primitive.max(rel_err_r(
        dx.data.as_slice().unwrap(),
        fd_x.as_slice().unwrap(),
    ));

    // activations
    let mut t = Tensor::zeros(2, 3, 3);
    for v in t.data.iter_mut() {
        *v = rng.gen_range(-1.5..1.5);
    }
    let mut tc = Tensor::zeros(2, 3, 3);
    for v in tc.data.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    for act_is_tanh in [false, true] {
        let grad = if act_is_tanh {
            tanh_act_vjp(&t, &tc)
        } else {
            leaky_relu_vjp(&t, &tc, 0.1)
        };
        let mut fd = grad.data.clone();
        for idx in 0..t.data.len() {
            let base = t.data.as_slice().unwrap()[idx];
            let mut f = |v: f64| -> f64 {
                let mut tp = t.clone();
                tp.data.as_slice_mut().unwrap()[idx] = v;
                let o = if act_is_tanh {
                    tanh_act(&tp)
                } else {
                    leaky_relu(&tp, 0.1)
                };
                o.data.iter().zip(tc.data.iter()).map(|(a, b)| a * b).sum()
            };
            fd.as_slice_mut().unwrap()[idx] = central_diff(&mut f, base, 1e-6);
        }
        worst_primitive = worst_primitive.max(rel_err_r(
            grad.data.as_slice().unwrap(),
            fd.as_slice().unwrap(),
        ));
    }

    // objective terms end to end on a tiny generator and dataset
    let pc = PhantomConfig {
        m: 5,
        spokes_per_frame: 4,
        samples_per_spoke: 32,
        n_coils: 2,
        seed: 9,
        ..PhantomConfig::default()
    };
    let ds = acquire(&pc).unwrap();
    let params = build_generator(Preset::Desk64, 2, 2, 77);
    let mut z = Array2::zeros((5, 2));
    for v in z.iter_mut() {
        *v = rng.gen_range(-0.3..0.3);
    }
    let batch = [0usize, 2, 4];
    let mut worst_e2e = 0.0f64;
    let fd_h = 1e-4;

    // exact and approx data terms plus the jacobian penalty, theta side:
    // check a sample of weights in every layer through the full value path
    {
        let frames = &ds.frames;
        let coils = &ds.coils;
        for mode in [LossMode::Exact, LossMode::Approx] {
            let value = |p: &GeneratorParams, zz: ArrayView2<f64>| -> f64 {
                total_cost_value(p, zz, frames, coils, &batch, 0.0, 0.0, mode).data
            };
            let (_, grads, d_z) = match mode {
                LossMode::Exact => data_loss_exact(&params, z.view(), frames, coils, &batch),
                LossMode::Approx => data_loss_approx(&params, z.view(), frames, coils, &batch),
            };
            // a handful of weights per layer
            let mut analytic = Vec::new();
            let mut numeric = Vec::new();
            let mut idx_rng = ChaCha12Rng::seed_from_u64(331);
            for (li, layer) in params.layers.iter().enumerate() {
                for _ in 0..4 {
                    let idx = idx_rng.gen_range(0..layer.kernel.len());
                    analytic.push(grads.kernels[li].as_slice().unwrap()[idx]);
                    let mut pp = params.clone();
                    let base = pp.layers[li].kernel.as_slice().unwrap()[idx];
                    let mut f = |v: f64| {
                        pp.layers[li].kernel.as_slice_mut().unwrap()[idx] = v;
                        value(&pp, z.view())
                    };
                    numeric.push(central_diff(&mut f, base, fd_h));
                }
            }
            worst_e2e = worst_e2e.max(rel_err_r(&analytic, &numeric));
            // all latent slots of the batch rows
            let mut analytic_z = Vec::new();
            let mut numeric_z = Vec::new();
            for &fi in &batch {
                for j in 0..z.ncols() {
                    analytic_z.push(d_z[[fi, j]]);
                    let base = z[[fi, j]];
                    let mut f = |v: f64| {
                        let mut zp = z.clone();
                        zp[[fi, j]] = v;
                        value(&params, zp.view())
                    };
                    numeric_z.push(central_diff(&mut f, base, fd_h));
                }
            }
            worst_e2e = worst_e2e.max(rel_err_r(&analytic_z, &numeric_z));
        }
    }

    // latent smoothness penalty: exact gradient, check every slot
    {
        let (_, grad) = latent_reg(z.view());
        let mut numeric = grad.clone();
        for idx in 0..z.len() {
            let base = z.as_slice().unwrap()[idx];
            let mut f = |v: f64| {
                let mut zp = z.clone();
                zp.as_slice_mut().unwrap()[idx] = v;
                latent_reg(zp.view()).0
            };
            numeric.as_slice_mut().unwrap()[idx] = central_diff(&mut f, base, 1e-5);
        }
        worst_primitive = worst_primitive.max(rel_err_r(
            grad.as_slice().unwrap(),
            numeric.as_slice().unwrap(),
        ));
    }

    // jacobian energy penalty: differentiate its displaced forward passes
    {
        let hj = 1e-3;
        let (_, grads, d_z) = distance_reg(&params, z.view(), &batch, hj);
        let value = |p: &GeneratorParams, zz: ArrayView2<f64>| -> f64 {
            let mut acc = 0.0;
            for &fi in &batch {
                let zi: Vec<f64> = zz.row(fi).to_vec();
                acc += jacobian_frobenius_sq(p, &zi, hj) / batch.len() as f64;
            }
            acc
        };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut idx_rng = ChaCha12Rng::seed_from_u64(787);
        for (li, layer) in params.layers.iter().enumerate() {
            for _ in 0..3 {
                let idx = idx_rng.gen_range(0..layer.kernel.len());
                analytic.push(grads.kernels[li].as_slice().unwrap()[idx]);
                let mut pp = params.clone();
                let base = pp.layers[li].kernel.as_slice().unwrap()[idx];
                let mut f = |v: f64| {
                    pp.layers[li].kernel.as_slice_mut().unwrap()[idx] = v;
                    value(&pp, z.view())
                };
                numeric.push(central_diff(&mut f, base, fd_h));
            }
        }
        for &fi in &batch {
            for j in 0..z.ncols() {
                analytic.push(d_z[[fi, j]]);
                let base = z[[fi, j]];
                let mut f = |v: f64| {
                    let mut zp = z.clone();
                    zp[[fi, j]] = v;
                    value(&params, zp.view())
                };
                numeric.push(central_diff(&mut f, base, fd_h));
            }
        }
        worst_e2e = worst_e2e.max(rel_err_r(&analytic, &numeric));
    }

    let secs = started.elapsed().as_secs_f64();
    let ok = worst_primitive < TOL_GRAD_PRIMITIVE
        && worst_e2e < TOL_GRAD_END_TO_END
        && secs < BUDGET_GRADIENTS_SECS;
    verdict(
        2,
        "gradient suite",
        ok,
        &format!(
            "worst primitive {worst_primitive:.2e} (<{TOL_GRAD_PRIMITIVE:.0e}), worst \
             end-to-end {worst_e2e:.2e} (<{TOL_GRAD_END_TO_END:.0e}), {secs:.1}s \
             (<{BUDGET_GRADIENTS_SECS:.0}s)"
        ),
    );
}

#[test]
fn criterion_3_path_length_bound() {
    let started = Instant::now();
    let params = build_generator(Preset::Desk64, 16, 2, 303);
    let mut rng = ChaCha12Rng::seed_from_u64(304);
    let mut violations = 0usize;
    let mut worst_ratio = 0.0f64;
    for _ in 0..100 {
        let z1: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let step: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let z2: Vec<f64> = z1.iter().zip(&step).map(|(a, b)| a + b).collect();
        let mid: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| 0.5 * (a + b)).collect();
        let dz = (step.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let length = path_length(&params, &z1, &z2, 32);
        let jmax = jacobian_frobenius_sq(&params, &z1, 1e-3)
            .max(jacobian_frobenius_sq(&params, &z2, 1e-3))
            .max(jacobian_frobenius_sq(&params, &mid, 1e-3))
            .sqrt();
        let bound = dz * jmax * PATH_BOUND_SLACK;
        if length > bound {
            violations += 1;
        }
        worst_ratio = worst_ratio.max(length / bound);
    }
    let secs = started.elapsed().as_secs_f64();
    let ok = violations == 0 && secs < BUDGET_PATH_SECS;
    verdict(
        3,
        "latent path bound",
        ok,
        &format!(
            "0 of 100 pairs may exceed ||dz||*||J||_F*{PATH_BOUND_SLACK}: {violations} exceeded \
             (worst ratio {worst_ratio:.4}), {secs:.1}s (<{BUDGET_PATH_SECS:.0}s)"
        ),
    );
}

#[test]
fn criterion_4_planted_solution() {
    // data generated by the untouched initial network itself, no noise:
    // the start is a global minimum, so the cost sits at zero and the
    // optimizer must not walk away from it
    let m = 6;
    let n = 64;
    let params = build_generator(Preset::Desk64, 2, 2, 404);
    let z = Array2::zeros((m, 2));
    let images = generate_batch(&params, z.view());
    let coils = simulate_coilmaps(2, n, 41);
    let mut frames = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let traj = dynrec::phantom::golden_angle_trajectory(i, 4, 2 * n);
        let samples = ndft_forward(img, &coils, &traj);
        frames.push(dynrec::kspace::KSpaceFrame::new(traj, samples).unwrap());
    }
    let level = LevelConfig {
        groups: m,
        epochs: 10,
        lr_net: 1e-3,
        lr_latent: 1e-3,
        policy: LossModePolicy::Auto,
    };
    let schedule = Schedule {
        levels: vec![level],
        batch_size: 3,
        switch_fraction: 0.5,
    };
    let mut trained = params.clone();
    let mut z_trained = z.clone();
    let mut max_cost = 0.0f64;
    let mut max_drift = 0.0f64;
    let mut prev: Option<Vec<f64>> = None;
    let mut rng = ChaCha12Rng::seed_from_u64(405);
    let mut hook = |ev: TrainEvent| {
        if let TrainEvent::Epoch { log, params, .. } = ev {
            max_cost = max_cost.max(log.breakdown.total);
            let mut flat = Vec::new();
            for l in &params.layers {
                flat.extend(l.kernel.iter().copied());
                flat.extend(l.bias.iter().copied());
            }
            if let Some(p) = &prev {
                let drift = p
                    .iter()
                    .zip(&flat)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                max_drift = max_drift.max(drift);
            }
            prev = Some(flat);
        }
    };
    dynrec::trainer::run_level(
        &mut trained,
        &mut z_trained,
        &frames,
        &coils,
        0,
        &level,
        &schedule,
        0.0,
        0.0,
        &mut rng,
        &mut hook,
    )
    .unwrap();
    let ok = max_cost < TOL_PLANTED_COST && max_drift < TOL_PLANTED_DRIFT;
    verdict(
        4,
        "planted solution",
        ok,
        &format!(
            "max cost {max_cost:.2e} (<{TOL_PLANTED_COST:.0e}), max per-epoch drift \
             {max_drift:.2e} (<{TOL_PLANTED_DRIFT:.0e}) over 10 epochs"
        ),
    );
}

// ---------------------------------------------------------------------------
// shared heavy runs for criteria 5-7

struct DeskRun {
    final_ser_db: f64,
    best_ser_db: f64,
    gridding_ser_db: f64,
    alignment: (f64, f64),
    train_secs: f64,
}

fn desk_dataset(seed: u64) -> Dataset {
    acquire(&PhantomConfig {
        seed,
        ..PhantomConfig::default()
    })
    .unwrap()
}

/// One full progressive run on the standard phantom, with per-epoch SER
/// tracking during the final level. `lambda1` lets criterion 7 switch the
/// network regularizer off.
fn desk_run(seed: u64, lambda1: f64) -> DeskRun {
    let ds = desk_dataset(seed);
    let truth = ds.truth.as_ref().unwrap();
    let m = ds.m();
    let cfg = TrainConfig {
        lambda1,
        seed,
        ..TrainConfig::desk(m)
    };
    let last_level = cfg.schedule.levels.len() - 1;
    let mut sers = Vec::new();
    let started = Instant::now();
    let (_, z, _report) = train(&cfg, &ds, &mut |ev| {
        if let TrainEvent::Epoch { log, params, z } = ev {
            if log.level == last_level {
                let recon = generate_batch(params, z.view());
                sers.push(ser(&truth.images, &recon).unwrap());
            }
        }
    })
    .unwrap();
    let train_secs = started.elapsed().as_secs_f64();
    let gridding: Vec<ComplexImage> = ds.frames.iter().map(|f| f.gridding(&ds.coils).clone()).collect();
    let final_ser_db = *sers.last().unwrap();
    let best_ser_db = sers.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    DeskRun {
        final_ser_db,
        best_ser_db,
        gridding_ser_db: ser(&truth.images, &gridding).unwrap(),
        alignment: latent_alignment(z.view(), truth.phases.view()),
        train_secs,
    }
}

/// The single-image baseline: identical pipeline, but only the pooled level
/// trains, so every frame gets the same picture.
fn static_fit_ser(seed: u64) -> f64 {
    let ds = desk_dataset(seed);
    let truth = ds.truth.as_ref().unwrap();
    let m = ds.m();
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::desk(m)
    };
    cfg.schedule.levels[1].epochs = 0;
    cfg.schedule.levels[2].epochs = 0;
    let (params, z, _) = train(&cfg, &ds, &mut |_| {}).unwrap();
    let recon = generate_batch(&params, z.view());
    ser(&truth.images, &recon).unwrap()
}

static RUN_SEED1: OnceLock<DeskRun> = OnceLock::new();
static RUNS_SEED23: OnceLock<Vec<DeskRun>> = OnceLock::new();
static STATIC_SEED1: OnceLock<f64> = OnceLock::new();
static ABLATION_SEED1: OnceLock<DeskRun> = OnceLock::new();

fn run_seed1() -> &'static DeskRun {
    RUN_SEED1.get_or_init(|| desk_run(1, TrainConfig::desk(100).lambda1))
}

#[test]
fn criterion_5_end_to_end_phantom() {
    let run = run_seed1();
    let static_ser = *STATIC_SEED1.get_or_init(|| static_fit_ser(1));
    let margin_gridding = run.final_ser_db - run.gridding_ser_db;
    let margin_static = run.final_ser_db - static_ser;
    let ok = margin_gridding >= MARGIN_DB
        && margin_static >= MARGIN_DB
        && run.train_secs < BUDGET_END_TO_END_SECS;
    verdict(
        5,
        "end-to-end phantom",
        ok,
        &format!(
            "SER {:.2} dB vs gridding {:.2} dB (margin {margin_gridding:.2}, need \
             >={MARGIN_DB}) and vs static fit {static_ser:.2} dB (margin {margin_static:.2}, \
             need >={MARGIN_DB}), train {:.0}s (<{BUDGET_END_TO_END_SECS:.0}s)",
            run.final_ser_db, run.gridding_ser_db, run.train_secs
        ),
    );
}

#[test]
fn criterion_6_latent_decoupling() {
    let first = run_seed1();
    let rest = RUNS_SEED23.get_or_init(|| {
        vec![
            desk_run(2, TrainConfig::desk(100).lambda1),
            desk_run(3, TrainConfig::desk(100).lambda1),
        ]
    });
    let mut cardiac: Vec<f64> = vec![first.alignment.0];
    let mut resp: Vec<f64> = vec![first.alignment.1];
    for r in rest {
        cardiac.push(r.alignment.0);
        resp.push(r.alignment.1);
    }
    let median = |v: &mut Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let med_c = median(&mut cardiac);
    let med_r = median(&mut resp);
    let ok = med_c >= ALIGNMENT_MIN && med_r >= ALIGNMENT_MIN;
    verdict(
        6,
        "latent decoupling",
        ok,
        &format!(
            "median alignment over 3 seeds: cardiac {med_c:.3}, respiratory {med_r:.3} \
             (both need >={ALIGNMENT_MIN})"
        ),
    );
}

#[test]
fn criterion_7_regularizer_ablation() {
    let with_regs = run_seed1();
    let ablated = ABLATION_SEED1.get_or_init(|| desk_run(1, 0.0));
    let drop_ablated = ablated.best_ser_db - ablated.final_ser_db;
    let drop_with = with_regs.best_ser_db - with_regs.final_ser_db;
    let ok = drop_ablated >= ABLATION_DROP_DB && drop_with <= REG_FINAL_WINDOW_DB;
    verdict(
        7,
        "regularizer ablation",
        ok,
        &format!(
            "lambda1=0: best {:.2} dB, final {:.2} dB, drop {drop_ablated:.2} \
             (need >={ABLATION_DROP_DB}); with both regularizers: best {:.2} dB, final {:.2} dB, \
             drop {drop_with:.2} (need <={REG_FINAL_WINDOW_DB})",
            ablated.best_ser_db, ablated.final_ser_db, with_regs.best_ser_db, with_regs.final_ser_db
        ),
    );
}

#[test]
fn criterion_8_progressive_speedup() {
    // smaller instance so the from-scratch arm stays affordable
    let pc = PhantomConfig {
        m: 30,
        seed: 8,
        ..PhantomConfig::default()
    };
    let ds = acquire(&pc).unwrap();
    let m = ds.m();
    let all: Vec<usize> = (0..m).collect();
    let eval = |params: &GeneratorParams, z: ArrayView2<f64>| -> f64 {
        total_cost_value(params, z, &ds.frames, &ds.coils, &all, 5e-4, 2.0, LossMode::Exact).total
    };

    let mk_cfg = |schedule: Schedule| TrainConfig {
        preset: Preset::Desk64,
        width: 8,
        latent_dim: 2,
        lambda1: 5e-4,
        lambda2: 2.0,
        schedule,
        seed: 8,
    };
    let level = |groups: usize, epochs: usize, lr_net: f64, lr_latent: f64, policy| LevelConfig {
        groups,
        epochs,
        lr_net,
        lr_latent,
        policy,
    };

    // progressive arm
    let three_level = Schedule {
        levels: vec![
            level(1, 80, 1e-3, 0.0, LossModePolicy::Auto),
            level(m.div_ceil(10), 30, 5e-4, 5e-3, LossModePolicy::Auto),
            level(m, 20, 5e-4, 1e-3, LossModePolicy::Exact),
        ],
        batch_size: 10,
        switch_fraction: 0.8,
    };
    let cfg_a = mk_cfg(three_level);
    let mut wall_a = 0.0;
    let mut final_loss_a = f64::INFINITY;
    let (_, _, _) = train(&cfg_a, &ds, &mut |ev| {
        if let TrainEvent::Epoch { log, params, z } = ev {
            wall_a += log.wall_secs;
            if log.level == 2 && log.epoch == 19 {
                final_loss_a = eval(params, z.view());
            }
        }
    })
    .unwrap();
    let threshold = final_loss_a;

    // from-scratch arm: all frames, exact loss, same seed, generous budget
    let budget_epochs = 400;
    let single = Schedule {
        levels: vec![level(m, budget_epochs, 5e-4, 1e-3, LossModePolicy::Exact)],
        batch_size: 10,
        switch_fraction: 0.8,
    };
    let cfg_b = mk_cfg(single);
    let mut wall_b = 0.0;
    let mut wall_b_at_hit = None;
    let (_, _, _) = train(&cfg_b, &ds, &mut |ev| {
        if let TrainEvent::Epoch { log, params, z } = ev {
            wall_b += log.wall_secs;
            if wall_b_at_hit.is_none() && eval(params, z.view()) <= threshold {
                wall_b_at_hit = Some(wall_b);
            }
        }
    })
    .unwrap();

    let (ok, detail) = match wall_b_at_hit {
        Some(t_b) => (
            wall_a <= SPEEDUP_RATIO * t_b,
            format!(
                "3-level reached loss {threshold:.3} in {wall_a:.1}s; from-scratch needed \
                 {t_b:.1}s (need <= {SPEEDUP_RATIO} of it)"
            ),
        ),
        None => (
            wall_a <= SPEEDUP_RATIO * wall_b,
            format!(
                "3-level reached loss {threshold:.3} in {wall_a:.1}s; from-scratch never \
                 reached it within {wall_b:.1}s / {budget_epochs} epochs"
            ),
        ),
    };
    verdict(8, "progressive speedup", ok, &detail);
}

#[test]
fn criterion_9_determinism_and_formats() {
    let dir = tempfile::tempdir().unwrap();
    // container round trips, bit for bit
    let pc = PhantomConfig {
        m: 6,
        spokes_per_frame: 4,
        samples_per_spoke: 48,
        n_coils: 2,
        seed: 12,
        ..PhantomConfig::default()
    };
    let ds = acquire(&pc).unwrap();
    let p1 = dir.path().join("a.gstm");
    let p2 = dir.path().join("b.gstm");
    write_dataset(&p1, &ds).unwrap();
    let back = read_dataset(&p1).unwrap();
    write_dataset(&p2, &back).unwrap();
    let dataset_roundtrip = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();

    let params = build_generator(Preset::Desk64, 2, 2, 13);
    let z = Array2::from_shape_fn((6, 2), |(i, j)| (i as f64) * 0.1 - j as f64);
    let c1 = dir.path().join("a.gsck");
    let c2 = dir.path().join("b.gsck");
    write_checkpoint(&c1, &params, &z).unwrap();
    let (bp, bz) = read_checkpoint(&c1).unwrap();
    write_checkpoint(&c2, &bp, &bz).unwrap();
    let checkpoint_roundtrip = std::fs::read(&c1).unwrap() == std::fs::read(&c2).unwrap();

    // config canonical text is a fixed point
    let cfg = RunConfig::default();
    let text = cfg.canonical();
    let reparsed = RunConfig::parse(&text).unwrap();
    let config_roundtrip = reparsed == cfg && reparsed.canonical() == text;

    // seeded rerun reproduces the final SER
    let run = |_: ()| -> f64 {
        let truth_images = &ds.truth.as_ref().unwrap().images;
        let cfg = TrainConfig {
            preset: Preset::Desk64,
            width: 2,
            latent_dim: 2,
            lambda1: 5e-4,
            lambda2: 2.0,
            schedule: Schedule {
                levels: vec![
                    LevelConfig {
                        groups: 1,
                        epochs: 6,
                        lr_net: 1e-3,
                        lr_latent: 0.0,
                        policy: LossModePolicy::Auto,
                    },
                    LevelConfig {
                        groups: 6,
                        epochs: 4,
                        lr_net: 5e-4,
                        lr_latent: 1e-3,
                        policy: LossModePolicy::Exact,
                    },
                ],
                batch_size: 3,
                switch_fraction: 0.8,
            },
            seed: 14,
        };
        let (p, zz, _) = train(&cfg, &ds, &mut |_| {}).unwrap();
        let recon = generate_batch(&p, zz.view());
        ser(truth_images, &recon).unwrap()
    };
    let s1 = run(());
    let s2 = run(());
    let repro = (s1 - s2).abs();

    let ok = dataset_roundtrip && checkpoint_roundtrip && config_roundtrip && repro <= TOL_SER_REPRO_DB;
    verdict(
        9,
        "determinism and formats",
        ok,
        &format!(
            "dataset round-trip {dataset_roundtrip}, checkpoint round-trip \
             {checkpoint_roundtrip}, config round-trip {config_roundtrip}, rerun SER delta \
             {repro:.2e} dB (<= {TOL_SER_REPRO_DB:.0e})"
        ),
    );
}
