//! Joint ADAM optimization of generator weights and per-frame latents, with
//! a progressive training-in-time schedule.
//!
//! Training runs in levels. The first level pools all measurements into a
//! single frame and fits the network only (one latent, pinned at zero). Each
//! following level splits the data into more groups, warm-starts the network
//! from the previous level and seeds its latents by interpolating the coarse
//! ones in time. Within a level, most epochs use the cheap gridding-matched
//! data term and the last stretch switches to the exact measurement loss.

use crate::generator::{build_generator, GeneratorParams, ParamGrads, Preset};
use crate::kspace::{CoilMaps, KSpaceFrame};
use crate::objective::{total_cost, CostBreakdown, LossMode};
use crate::phantom::Dataset;
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::time::Instant;

/// Bias-corrected ADAM over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update in place. Returns false (and leaves everything untouched,
    /// including the step counter) when the gradient contains non-finite
    /// entries.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> bool {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        if grads.iter().any(|g| !g.is_finite()) {
            return false;
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        true
    }
}

/// When a level uses the matched-filter data term vs the exact one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossModePolicy {
    Approx,
    Exact,
    /// approx for the first `switch_fraction` of the epochs, exact after
    Auto,
}

impl LossModePolicy {
    pub fn label(&self) -> &'static str {
        match self {
            LossModePolicy::Approx => "approx",
            LossModePolicy::Exact => "exact",
            LossModePolicy::Auto => "auto",
        }
    }

    pub fn mode_for(&self, epoch: usize, epochs: usize, switch_fraction: f64) -> LossMode {
        match self {
            LossModePolicy::Approx => LossMode::Approx,
            LossModePolicy::Exact => LossMode::Exact,
            LossModePolicy::Auto => {
                let cutoff = (epochs as f64 * switch_fraction).floor() as usize;
                if epoch < cutoff {
                    LossMode::Approx
                } else {
                    LossMode::Exact
                }
            }
        }
    }
}

impl std::str::FromStr for LossModePolicy {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "approx" => Ok(LossModePolicy::Approx),
            "exact" => Ok(LossModePolicy::Exact),
            "auto" => Ok(LossModePolicy::Auto),
            other => Err(crate::Error::Format(format!(
                "unknown loss mode '{other}' (expected approx, exact or auto)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LevelConfig {
    /// number of pooled frame groups this level trains on
    pub groups: usize,
    pub epochs: usize,
    pub lr_net: f64,
    pub lr_latent: f64,
    pub policy: LossModePolicy,
}

#[derive(Clone, Debug)]
pub struct Schedule {
    pub levels: Vec<LevelConfig>,
    pub batch_size: usize,
    /// fraction of each level's epochs run in approx mode under Auto
    pub switch_fraction: f64,
}

impl Schedule {
    /// Trimmed schedule sized for a single CPU core at 64x64.
    ///
    /// The pooled levels warm up on the cheap gridded data term and switch to
    /// the exact one near the end; the final per-frame level runs exact from
    /// the start. Under the per-pixel/per-sample loss normalization the
    /// gridded term's value is small enough that the latent smoothness
    /// penalty can pin the frames to their mean; the exact term dominates it
    /// by orders of magnitude, so motion only develops at full strength in
    /// exact mode.
    pub fn desk(m: usize) -> Self {
        Schedule {
            levels: vec![
                LevelConfig {
                    groups: 1,
                    epochs: 200,
                    lr_net: 1e-3,
                    lr_latent: 0.0,
                    policy: LossModePolicy::Auto,
                },
                LevelConfig {
                    groups: m.div_ceil(10),
                    epochs: 80,
                    lr_net: 5e-4,
                    lr_latent: 5e-3,
                    policy: LossModePolicy::Auto,
                },
                LevelConfig {
                    groups: m,
                    epochs: 70,
                    lr_net: 5e-4,
                    lr_latent: 1e-3,
                    policy: LossModePolicy::Exact,
                },
            ],
            batch_size: 10,
            switch_fraction: 0.8,
        }
    }

    /// Full-length schedule (hours of CPU time at 340x340).
    pub fn full(m: usize) -> Self {
        let mut s = Schedule::desk(m);
        s.levels[0].epochs = 1000;
        s.levels[1].epochs = 600;
        s.levels[2].epochs = 700;
        s
    }

    pub fn validate(&self, m: usize) -> crate::Result<()> {
        let err = |msg: String| Err(crate::Error::Format(msg));
        if self.levels.is_empty() {
            return err("schedule needs at least one level".into());
        }
        if self.batch_size == 0 {
            return err("batch size must be positive".into());
        }
        if !(self.switch_fraction > 0.0 && self.switch_fraction <= 1.0) {
            return err(format!("switch fraction {} outside (0, 1]", self.switch_fraction));
        }
        let mut prev = 0usize;
        for (i, l) in self.levels.iter().enumerate() {
            if l.groups < 1 || l.groups > m {
                return err(format!("level {i}: {} groups outside 1..={m}", l.groups));
            }
            if l.groups < prev {
                return err(format!("level {i}: group count decreases"));
            }
            prev = l.groups;
        }
        if self.levels.last().unwrap().groups != m {
            return err(format!("final level must train all {m} frames"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub preset: Preset,
    pub width: usize,
    pub latent_dim: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub schedule: Schedule,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk(m: usize) -> Self {
        TrainConfig {
            preset: Preset::Desk64,
            width: 16,
            latent_dim: 2,
            lambda1: 5e-4,
            lambda2: 2.0,
            schedule: Schedule::desk(m),
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub level: usize,
    pub epoch: usize,
    pub breakdown: CostBreakdown,
    pub wall_secs: f64,
    pub rejected_steps: usize,
}

#[derive(Clone, Debug)]
pub struct LevelSummary {
    pub level: usize,
    pub groups: usize,
    pub epochs: usize,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub levels: Vec<LevelSummary>,
}

impl TrainReport {
    pub fn rejected_steps(&self) -> usize {
        self.epochs.iter().map(|e| e.rejected_steps).sum()
    }
}

/// Progress callbacks so a frontend can log lines and write checkpoints at
/// level boundaries without the trainer knowing about files.
pub enum TrainEvent<'a> {
    /// End of one epoch, with the model as it stands. `z` has one row per
    /// frame group of the current level, not necessarily per frame.
    Epoch {
        log: &'a EpochLog,
        params: &'a GeneratorParams,
        z: &'a Array2<f64>,
    },
    LevelEnd {
        level: usize,
        params: &'a GeneratorParams,
        z: &'a Array2<f64>,
    },
}

/// Contiguous near-equal partition of m items into the given number of runs;
/// the remainder goes to the first runs. Returns (start, len) pairs.
pub fn partition(m: usize, groups: usize) -> Vec<(usize, usize)> {
    assert!(groups >= 1 && groups <= m, "need 1 <= groups <= {m}");
    let base = m / groups;
    let rem = m % groups;
    let mut out = Vec::with_capacity(groups);
    let mut start = 0;
    for g in 0..groups {
        let len = base + usize::from(g < rem);
        out.push((start, len));
        start += len;
    }
    out
}

/// Temporal centers of each run, in frame-index units.
pub fn partition_centers(m: usize, groups: usize) -> Vec<f64> {
    partition(m, groups)
        .into_iter()
        .map(|(start, len)| (start + start + len - 1) as f64 / 2.0)
        .collect()
}

/// Merge the frames of each contiguous run into one frame holding the
/// concatenated spokes; density weights (and the cached gridding/Toeplitz
/// data) are rebuilt on the joint trajectory.
pub fn pool_frames(dataset: &Dataset, groups: usize) -> crate::Result<Dataset> {
    let m = dataset.m();
    let mut frames = Vec::with_capacity(groups);
    for (start, len) in partition(m, groups) {
        let members = &dataset.frames[start..start + len];
        let total: usize = members.iter().map(|f| f.trajectory.len()).sum();
        let coils = members[0].samples.nrows();
        let mut coords = Array2::zeros((total, 2));
        let mut samples = Array2::zeros((coils, total));
        let mut at = 0;
        for f in members {
            let s = f.trajectory.len();
            coords
                .slice_mut(ndarray::s![at..at + s, ..])
                .assign(&f.trajectory.coords);
            samples
                .slice_mut(ndarray::s![.., at..at + s])
                .assign(&f.samples);
            at += s;
        }
        frames.push(KSpaceFrame::new(
            crate::kspace::Trajectory::new(coords)?,
            samples,
        )?);
    }
    Ok(Dataset {
        frames,
        coils: dataset.coils.clone(),
        truth: None,
        n: dataset.n,
    })
}

/// Piecewise-linear interpolation of latent rows placed at `coarse_centers`,
/// evaluated at `times`, with constant extrapolation beyond the ends.
pub fn interpolate_at_centers(
    z_coarse: ArrayView2<f64>,
    coarse_centers: &[f64],
    times: &[f64],
) -> Array2<f64> {
    let m = z_coarse.nrows();
    assert_eq!(m, coarse_centers.len());
    assert!(m >= 1);
    let l = z_coarse.ncols();
    let mut out = Array2::zeros((times.len(), l));
    for (row, &t) in times.iter().enumerate() {
        if t <= coarse_centers[0] || m == 1 {
            out.row_mut(row).assign(&z_coarse.row(0));
        } else if t >= coarse_centers[m - 1] {
            out.row_mut(row).assign(&z_coarse.row(m - 1));
        } else {
            let k = coarse_centers.partition_point(|&c| c <= t) - 1;
            let w = (t - coarse_centers[k]) / (coarse_centers[k + 1] - coarse_centers[k]);
            for j in 0..l {
                out[[row, j]] = (1.0 - w) * z_coarse[[k, j]] + w * z_coarse[[k + 1, j]];
            }
        }
    }
    out
}

/// Upsample coarse per-group latents to one latent per fine frame, with each
/// coarse latent anchored at the temporal center of its group.
pub fn interpolate_latents(z_coarse: ArrayView2<f64>, m_fine: usize) -> Array2<f64> {
    let centers = partition_centers(m_fine, z_coarse.nrows());
    let times: Vec<f64> = (0..m_fine).map(|t| t as f64).collect();
    interpolate_at_centers(z_coarse, &centers, &times)
}

fn write_theta_flat(params: &GeneratorParams, out: &mut Vec<f64>) {
    out.clear();
    for layer in &params.layers {
        out.extend(layer.kernel.iter());
        out.extend(layer.bias.iter());
    }
}

fn read_theta_flat(params: &mut GeneratorParams, flat: &[f64]) {
    let mut at = 0;
    for layer in &mut params.layers {
        for w in layer.kernel.iter_mut() {
            *w = flat[at];
            at += 1;
        }
        for b in layer.bias.iter_mut() {
            *b = flat[at];
            at += 1;
        }
    }
    assert_eq!(at, flat.len());
}

fn write_grads_flat(grads: &ParamGrads, out: &mut Vec<f64>) {
    out.clear();
    for (k, b) in grads.kernels.iter().zip(&grads.biases) {
        out.extend(k.iter());
        out.extend(b.iter());
    }
}

/// Run every epoch of one level in place. Fresh optimizer state; the frames
/// are the (already pooled) groups this level trains on.
#[allow(clippy::too_many_arguments)]
pub fn run_level(
    params: &mut GeneratorParams,
    z: &mut Array2<f64>,
    frames: &[KSpaceFrame],
    coils: &CoilMaps,
    level_idx: usize,
    level: &LevelConfig,
    schedule: &Schedule,
    lambda1: f64,
    lambda2: f64,
    rng: &mut ChaCha12Rng,
    hook: &mut dyn FnMut(TrainEvent),
) -> crate::Result<Vec<EpochLog>> {
    let m = frames.len();
    assert_eq!(z.nrows(), m, "one latent per frame group");
    let mut adam_theta = AdamState::new(params.count_params());
    let mut adam_z = AdamState::new(z.len());
    let mut theta_flat = Vec::new();
    let mut grad_flat = Vec::new();
    write_theta_flat(params, &mut theta_flat);
    let mut logs = Vec::with_capacity(level.epochs);
    let mut order: Vec<usize> = (0..m).collect();
    for epoch in 0..level.epochs {
        let started = Instant::now();
        let mode = level.policy.mode_for(epoch, level.epochs, schedule.switch_fraction);
        order.shuffle(rng);
        let mut sum = CostBreakdown::default();
        let mut steps = 0usize;
        let mut rejected = 0usize;
        for batch in order.chunks(schedule.batch_size) {
            let (bd, grads, d_z) =
                total_cost(params, z.view(), frames, coils, batch, lambda1, lambda2, mode);
            if !bd.total.is_finite() {
                return Err(crate::Error::NonFiniteLoss {
                    level: level_idx,
                    epoch,
                });
            }
            write_grads_flat(&grads, &mut grad_flat);
            let theta_ok = adam_theta.step(&mut theta_flat, &grad_flat, level.lr_net);
            if theta_ok {
                read_theta_flat(params, &theta_flat);
            }
            let z_ok = adam_z.step(
                z.as_slice_mut().expect("latents are contiguous"),
                d_z.as_slice().expect("latent grads are contiguous"),
                level.lr_latent,
            );
            if !theta_ok || !z_ok {
                rejected += 1;
                eprintln!(
                    "warning: level {level_idx} epoch {epoch}: non-finite gradient, step skipped"
                );
            }
            sum.data += bd.data;
            sum.distance += bd.distance;
            sum.latent += bd.latent;
            sum.total += bd.total;
            sum.n_terms += bd.n_terms;
            steps += 1;
        }
        let k = steps.max(1) as f64;
        let log = EpochLog {
            level: level_idx,
            epoch,
            breakdown: CostBreakdown {
                data: sum.data / k,
                distance: sum.distance / k,
                latent: sum.latent / k,
                total: sum.total / k,
                n_terms: sum.n_terms,
            },
            wall_secs: started.elapsed().as_secs_f64(),
            rejected_steps: rejected,
        };
        hook(TrainEvent::Epoch {
            log: &log,
            params,
            z,
        });
        logs.push(log);
    }
    Ok(logs)
}

/// The full progressive run: pool, train, re-split, warm-start, repeat.
/// Returns the final network, one latent per frame, and the epoch history.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    hook: &mut dyn FnMut(TrainEvent),
) -> crate::Result<(GeneratorParams, Array2<f64>, TrainReport)> {
    let params = build_generator(cfg.preset, cfg.width, cfg.latent_dim, cfg.seed);
    train_with_net(cfg, dataset, params, hook)
}

/// Same as [`train`] but starting from an existing network (custom
/// architectures, resumed runs).
pub fn train_with_net(
    cfg: &TrainConfig,
    dataset: &Dataset,
    mut params: GeneratorParams,
    hook: &mut dyn FnMut(TrainEvent),
) -> crate::Result<(GeneratorParams, Array2<f64>, TrainReport)> {
    crate::keep_large_allocations_cached();
    let m = dataset.m();
    cfg.schedule.validate(m)?;
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(17); // distinct from data-synthesis and init streams
    let mut report = TrainReport::default();
    let mut z: Option<Array2<f64>> = None;
    let mut prev_groups = 0usize;
    for (level_idx, level) in cfg.schedule.levels.iter().enumerate() {
        if level.groups == prev_groups {
            continue; // a level with the same split adds nothing new
        }
        let pooled_storage;
        let frames: &[KSpaceFrame] = if level.groups == m {
            &dataset.frames
        } else {
            pooled_storage = pool_frames(dataset, level.groups)?;
            &pooled_storage.frames
        };
        let mut z_level = match &z {
            None => Array2::zeros((level.groups, cfg.latent_dim)),
            Some(prev) => interpolate_at_centers(
                prev.view(),
                &partition_centers(m, prev_groups),
                &partition_centers(m, level.groups),
            ),
        };
        let started = Instant::now();
        let logs = run_level(
            &mut params,
            &mut z_level,
            frames,
            &dataset.coils,
            level_idx,
            level,
            &cfg.schedule,
            cfg.lambda1,
            cfg.lambda2,
            &mut shuffle_rng,
            hook,
        )?;
        report.levels.push(LevelSummary {
            level: level_idx,
            groups: level.groups,
            epochs: logs.len(),
            wall_secs: started.elapsed().as_secs_f64(),
        });
        report.epochs.extend(logs);
        hook(TrainEvent::LevelEnd {
            level: level_idx,
            params: &params,
            z: &z_level,
        });
        z = Some(z_level);
        prev_groups = level.groups;
    }
    let z_final = match z {
        Some(z) if prev_groups == m => z,
        Some(z) => interpolate_at_centers(
            z.view(),
            &partition_centers(m, prev_groups),
            &(0..m).map(|t| t as f64).collect::<Vec<_>>(),
        ),
        None => Array2::zeros((m, cfg.latent_dim)),
    };
    Ok((params, z_final, report))
}
