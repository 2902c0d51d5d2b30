//! Synthetic ground truth: an analytic moving phantom, golden-angle radial
//! trajectories, smooth coil maps, and noisy measurement synthesis.
//!
//! The phantom is a set of ellipses with complex amplitudes, rendered with
//! 4x4 subpixel anti-aliasing and modulated by two independent motion
//! factors: a designated blood-pool ellipse swells with the cardiac phase
//! (semi-axes scaled by 1 + depth * phase) and the whole torso translates
//! vertically with the respiratory phase. A fixed smooth phase roll rides on
//! the object (it translates with it), so the truth is genuinely complex.
//!
//! Every frame is a deterministic function of its two phases; all
//! randomness (coil maps aside, which take their own seed path) comes from
//! seeded, per-purpose RNG streams, so a dataset is reproducible bit for
//! bit from its config.

use crate::generator::{ComplexImage, ImageSeries};
use crate::kspace::{ndft_forward, CoilMaps, KSpaceFrame, Trajectory};
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;

/// Golden angle in radians (111.246 degrees): successive spokes rotate by
/// this much, filling angle space almost uniformly without ever repeating.
pub const GOLDEN_ANGLE: f64 = PI * 1.2360679774997896 / 2.0; // pi*(sqrt(5)-1)/2

/// One ellipse of the phantom. Geometry is in fractions of the grid size,
/// centered coordinates (so the field of view is [-0.5, 0.5) on both axes).
#[derive(Clone, Copy, Debug)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub rot: f64,
    pub amp: Complex64,
    /// semi-axes follow the cardiac phase if set
    pub pulsates: bool,
}

#[derive(Clone, Debug)]
pub struct PhantomConfig {
    pub n: usize,
    pub m: usize,
    pub ellipses: Vec<Ellipse>,
    /// cycles/frame
    pub cardiac_freq: f64,
    /// relative semi-axis modulation of the pulsating ellipse
    pub cardiac_depth: f64,
    /// cycles/frame
    pub resp_freq: f64,
    /// vertical translation amplitude in pixels
    pub resp_amplitude: f64,
    /// infinite means noiseless
    pub snr_db: f64,
    pub n_coils: usize,
    pub spokes_per_frame: usize,
    pub samples_per_spoke: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n: 64,
            m: 100,
            ellipses: default_ellipses(),
            cardiac_freq: 0.12,
            cardiac_depth: 0.25,
            resp_freq: 0.017,
            resp_amplitude: 3.0,
            snr_db: 30.0,
            n_coils: 4,
            spokes_per_frame: 8,
            samples_per_spoke: 128,
            seed: 1,
        }
    }
}

/// Torso cross-section: body, two lungs, a pulsating blood pool, a small
/// bright vessel and the spine. Amplitudes are chosen so the summed value
/// stays well inside the unit box per channel.
pub fn default_ellipses() -> Vec<Ellipse> {
    vec![
        Ellipse {
            cx: 0.0,
            cy: 0.02,
            a: 0.40,
            b: 0.34,
            rot: 0.0,
            amp: Complex64::new(0.50, 0.04),
            pulsates: false,
        },
        Ellipse {
            cx: -0.16,
            cy: -0.06,
            a: 0.11,
            b: 0.16,
            rot: 0.25,
            amp: Complex64::new(-0.28, -0.02),
            pulsates: false,
        },
        Ellipse {
            cx: 0.16,
            cy: -0.06,
            a: 0.11,
            b: 0.16,
            rot: -0.25,
            amp: Complex64::new(-0.28, -0.02),
            pulsates: false,
        },
        Ellipse {
            cx: -0.02,
            cy: 0.08,
            a: 0.10,
            b: 0.10,
            rot: 0.0,
            amp: Complex64::new(0.33, 0.12),
            pulsates: true,
        },
        Ellipse {
            cx: 0.10,
            cy: 0.18,
            a: 0.045,
            b: 0.045,
            rot: 0.0,
            amp: Complex64::new(0.25, -0.08),
            pulsates: false,
        },
        Ellipse {
            cx: 0.0,
            cy: 0.30,
            a: 0.06,
            b: 0.05,
            rot: 0.0,
            amp: Complex64::new(0.22, 0.0),
            pulsates: false,
        },
    ]
}

impl PhantomConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let err = |msg: String| Err(crate::Error::Format(msg));
        if self.n < 8 {
            return err(format!("grid size {} too small", self.n));
        }
        if self.m < 1 {
            return err("need at least one frame".into());
        }
        if !(self.cardiac_freq > 0.0 && self.resp_freq > 0.0) {
            return err("motion frequencies must be positive".into());
        }
        if self.cardiac_freq <= self.resp_freq {
            return err(format!(
                "cardiac frequency {} must exceed respiratory frequency {}",
                self.cardiac_freq, self.resp_freq
            ));
        }
        if self.samples_per_spoke % 2 != 0 || self.samples_per_spoke == 0 {
            return err("samples per spoke must be even".into());
        }
        if self.spokes_per_frame == 0 || self.n_coils == 0 {
            return err("need at least one spoke and one coil".into());
        }
        if !(0.0..1.0).contains(&self.cardiac_depth) {
            return err(format!("cardiac depth {} outside [0, 1)", self.cardiac_depth));
        }
        // every ellipse must stay inside the field of view at the motion
        // extremes
        let shift = self.resp_amplitude / self.n as f64;
        for (i, e) in self.ellipses.iter().enumerate() {
            let grow = if e.pulsates { 1.0 + self.cardiac_depth } else { 1.0 };
            let (a, b) = (e.a * grow, e.b * grow);
            // half-extents of the rotated ellipse's bounding box
            let (s, c) = e.rot.sin_cos();
            let ex = ((a * c).powi(2) + (b * s).powi(2)).sqrt();
            let ey = ((a * s).powi(2) + (b * c).powi(2)).sqrt();
            if e.cx.abs() + ex > 0.5 || e.cy.abs() + ey + shift.abs() > 0.5 {
                return err(format!("ellipse {i} leaves the field of view under modulation"));
            }
        }
        Ok(())
    }
}

/// Ground-truth image series and the phases that generated it.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub images: ImageSeries,
    /// (M, 2): cardiac phase, respiratory phase
    pub phases: Array2<f64>,
}

/// A complete simulated acquisition.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub frames: Vec<KSpaceFrame>,
    pub coils: CoilMaps,
    pub truth: Option<GroundTruth>,
    pub n: usize,
}

impl Dataset {
    pub fn m(&self) -> usize {
        self.frames.len()
    }
}

/// Phases per frame: sin(2 pi f t) for both motion factors.
pub fn motion_trace(config: &PhantomConfig) -> Array2<f64> {
    let mut out = Array2::zeros((config.m, 2));
    for t in 0..config.m {
        out[[t, 0]] = (2.0 * PI * config.cardiac_freq * t as f64).sin();
        out[[t, 1]] = (2.0 * PI * config.resp_freq * t as f64).sin();
    }
    out
}

/// Fixed smooth phase roll, evaluated in object coordinates so it moves
/// with the torso.
fn phase_roll(ox: f64, oy: f64) -> f64 {
    1.1 * ox - 0.7 * oy + 1.9 * ox * oy
}

/// Render one frame at the given motion phases.
pub fn phantom_frame(config: &PhantomConfig, cardiac_phase: f64, resp_phase: f64) -> ComplexImage {
    assert!(
        (-1.0..=1.0).contains(&cardiac_phase) && (-1.0..=1.0).contains(&resp_phase),
        "motion phases must lie in [-1, 1]"
    );
    let n = config.n;
    let shift = config.resp_amplitude * resp_phase / n as f64;
    let grow = 1.0 + config.cardiac_depth * cardiac_phase;
    let mut img = ComplexImage::zeros(n);
    const SUB: usize = 4;
    let inv = 1.0 / (SUB * SUB) as f64;
    for y in 0..n {
        for x in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let fy = (y as f64 + (sy as f64 + 0.5) / SUB as f64 - 0.5 - n as f64 / 2.0)
                        / n as f64;
                    let fx = (x as f64 + (sx as f64 + 0.5) / SUB as f64 - 0.5 - n as f64 / 2.0)
                        / n as f64;
                    // object coordinates: undo the respiratory translation
                    let oy = fy - shift;
                    let ox = fx;
                    let mut v = Complex64::new(0.0, 0.0);
                    for e in &config.ellipses {
                        let (a, b) = if e.pulsates {
                            (e.a * grow, e.b * grow)
                        } else {
                            (e.a, e.b)
                        };
                        let du = ox - e.cx;
                        let dv = oy - e.cy;
                        let (s, c) = e.rot.sin_cos();
                        let u = c * du + s * dv;
                        let w = -s * du + c * dv;
                        if (u / a) * (u / a) + (w / b) * (w / b) <= 1.0 {
                            v += e.amp;
                        }
                    }
                    if v.norm_sqr() > 0.0 {
                        acc += v * Complex64::from_polar(1.0, phase_roll(ox, oy));
                    }
                }
            }
            img.values[[y, x]] = acc * inv;
        }
    }
    img
}

/// Golden-angle radial spokes for one frame. Spoke g (globally numbered
/// across frames) lies at angle g * GOLDEN_ANGLE mod pi, with samples evenly
/// spaced along the full diameter.
pub fn golden_angle_trajectory(
    frame_idx: usize,
    spokes_per_frame: usize,
    samples_per_spoke: usize,
) -> Trajectory {
    assert!(samples_per_spoke % 2 == 0, "samples per spoke must be even");
    let s = spokes_per_frame * samples_per_spoke;
    let mut coords = Array2::zeros((s, 2));
    for j in 0..spokes_per_frame {
        let g = frame_idx * spokes_per_frame + j;
        let angle = (g as f64 * GOLDEN_ANGLE) % PI;
        let (sin, cos) = angle.sin_cos();
        for t in 0..samples_per_spoke {
            let r = -0.5 + t as f64 / samples_per_spoke as f64;
            coords[[j * samples_per_spoke + t, 0]] = r * cos;
            coords[[j * samples_per_spoke + t, 1]] = r * sin;
        }
    }
    Trajectory::new(coords).expect("golden-angle coordinates are in range by construction")
}

/// Smooth synthetic coil sensitivities: Gaussian magnitude bumps centered at
/// equally spaced positions on the field-of-view border, each with a gentle
/// linear phase. A single coil gets a centered bump instead (near-uniform
/// over the object).
pub fn simulate_coilmaps(n_coils: usize, n: usize, seed: u64) -> CoilMaps {
    assert!(n_coils >= 1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let sigma = 0.6 * n as f64;
    let half = n as f64 / 2.0;
    let mut maps = Array3::zeros((n_coils, n, n));
    use rand::Rng;
    for c in 0..n_coils {
        let (bx, by) = if n_coils == 1 {
            (0.0, 0.0)
        } else {
            let ang = 2.0 * PI * c as f64 / n_coils as f64;
            (0.5 * n as f64 * ang.cos(), 0.5 * n as f64 * ang.sin())
        };
        // small random linear phase, at most ~half a cycle across the grid
        let gx = rng.gen_range(-0.5..0.5) / n as f64;
        let gy = rng.gen_range(-0.5..0.5) / n as f64;
        let p0 = rng.gen_range(-PI..PI);
        for y in 0..n {
            for x in 0..n {
                let dx = x as f64 - half - bx;
                let dy = y as f64 - half - by;
                let mag = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                let phase = p0 + 2.0 * PI * (gx * (x as f64 - half) + gy * (y as f64 - half));
                maps[[c, y, x]] = Complex64::from_polar(mag, phase);
            }
        }
    }
    CoilMaps::new(maps).expect("constructed maps satisfy the support invariant")
}

/// Render the ground truth, sample it along golden-angle spokes, and add
/// complex Gaussian noise scaled to the requested SNR over the whole
/// dataset. Deterministic given the config.
pub fn acquire(config: &PhantomConfig) -> crate::Result<Dataset> {
    config.validate()?;
    let phases = motion_trace(config);
    let coils = simulate_coilmaps(config.n_coils, config.n, config.seed);
    let mut images = Vec::with_capacity(config.m);
    let mut clean: Vec<Array2<Complex64>> = Vec::with_capacity(config.m);
    let mut trajectories = Vec::with_capacity(config.m);
    let mut energy = 0.0;
    for t in 0..config.m {
        let img = phantom_frame(config, phases[[t, 0]], phases[[t, 1]]);
        let traj =
            golden_angle_trajectory(t, config.spokes_per_frame, config.samples_per_spoke);
        let samples = ndft_forward(&img, &coils, &traj);
        energy += samples.iter().map(|v| v.norm_sqr()).sum::<f64>();
        images.push(img);
        clean.push(samples);
        trajectories.push(traj);
    }
    let total_samples =
        config.n_coils * config.spokes_per_frame * config.samples_per_spoke * config.m;
    let sigma = if config.snr_db.is_finite() {
        (energy / total_samples as f64).sqrt() / 10f64.powf(config.snr_db / 20.0)
    } else {
        0.0
    };
    let per_component = Normal::new(0.0, (sigma * sigma / 2.0).sqrt().max(f64::MIN_POSITIVE))
        .expect("valid normal");
    let mut frames = Vec::with_capacity(config.m);
    for (t, (mut samples, traj)) in clean.into_iter().zip(trajectories).enumerate() {
        if sigma > 0.0 {
            // a dedicated stream per frame keeps the noise independent of
            // the phantom content and of frame count changes
            let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
            rng.set_stream(1 + t as u64);
            for v in samples.iter_mut() {
                let re = per_component.sample(&mut rng);
                let im = per_component.sample(&mut rng);
                *v += Complex64::new(re, im);
            }
        }
        frames.push(KSpaceFrame::new(traj, samples)?);
    }
    Ok(Dataset {
        frames,
        coils,
        truth: Some(GroundTruth { images, phases }),
        n: config.n,
    })
}
