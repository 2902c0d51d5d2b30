//! The image generator: a chain of transposed convolutions that maps a short
//! latent vector (fed in as a 1x1 image with one channel per component) up to
//! a two-channel N x N image. Channel 0 is the real part, channel 1 the
//! imaginary part. Hidden layers use leaky ReLU; the output layer uses tanh,
//! so every pixel of both channels lands in [-1, 1].
//!
//! Two presets are provided. `desk64` produces 64x64 images and is sized for
//! a single CPU core; `paper340` is the full-scale 340x340 network with the
//! same channel-decay pattern. Both take a width multiplier `d`.
//!
//! Besides the forward pass (with an optional tape for reverse-mode
//! gradients) this module computes two geometric quantities used by the
//! training objective and its tests: a central-difference estimate of the
//! squared Frobenius norm of the Jacobian dG/dz, and the image-space length
//! of the path traced when the latent moves along a straight line.

use crate::diffops::{
    conv_transpose2d_batch, conv_transpose2d_vjp_batch, init_layer, Activation, Batch,
    LayerWeights,
};
use ndarray::{Array1, Array2, Array4, ArrayView2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Leaky ReLU slope for all hidden layers.
pub const HIDDEN_SLOPE: f64 = 0.1;

/// A complex-valued square image.
#[derive(Clone, Debug)]
pub struct ComplexImage {
    pub values: Array2<Complex64>,
}

impl ComplexImage {
    pub fn zeros(n: usize) -> Self {
        ComplexImage {
            values: Array2::zeros((n, n)),
        }
    }

    pub fn n(&self) -> usize {
        self.values.dim().0
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

pub type ImageSeries = Vec<ComplexImage>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk64,
    Paper340,
}

impl std::str::FromStr for Preset {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "desk64" => Ok(Preset::Desk64),
            "paper340" => Ok(Preset::Paper340),
            other => Err(crate::Error::Format(format!(
                "unknown preset '{other}' (expected desk64 or paper340)"
            ))),
        }
    }
}

/// All trainable state of the generator plus its activation plan.
#[derive(Clone, Debug)]
pub struct GeneratorParams {
    pub layers: Vec<LayerWeights>,
    pub activations: Vec<Activation>,
    pub latent_dim: usize,
}

impl GeneratorParams {
    pub fn count_params(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Output image side length, obtained by chasing the shape chain from a
    /// 1x1 input.
    pub fn output_size(&self) -> usize {
        self.layers.iter().fold(1, |n, l| l.out_size(n))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.kernel.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    /// Structural consistency as a recoverable error, for networks built
    /// from external files rather than presets.
    pub fn check_consistent(&self) -> crate::Result<()> {
        let fail = |msg: String| Err(crate::Error::Format(msg));
        if self.layers.is_empty() || self.layers.len() != self.activations.len() {
            return fail("layer and activation lists are empty or mismatched".into());
        }
        if self.layers[0].c_in() != self.latent_dim {
            return fail(format!(
                "first layer consumes {} channels but the latent has {}",
                self.layers[0].c_in(),
                self.latent_dim
            ));
        }
        for k in 1..self.layers.len() {
            if self.layers[k - 1].c_out() != self.layers[k].c_in() {
                return fail(format!("channel chain broken between layers {} and {k}", k - 1));
            }
        }
        if self.layers.last().unwrap().c_out() != 2 {
            return fail("output must be re/im channels".into());
        }
        Ok(())
    }

    fn validate(&self) {
        assert_eq!(self.layers.len(), self.activations.len());
        assert!(!self.layers.is_empty());
        assert_eq!(self.layers[0].c_in(), self.latent_dim, "first layer must consume the latent");
        for k in 1..self.layers.len() {
            assert_eq!(
                self.layers[k - 1].c_out(),
                self.layers[k].c_in(),
                "channel chain broken between layers {} and {}",
                k - 1,
                k
            );
        }
        assert_eq!(self.layers.last().unwrap().c_out(), 2, "output must be re/im channels");
    }
}

/// (c_out, k, stride, padding) per layer; c_in chains from the previous row.
fn preset_rows(preset: Preset, d: usize) -> Vec<(usize, usize, usize, usize)> {
    match preset {
        // 1x1 -> 4x4, then four stride-2 doublings to 64, then two 3x3
        // refinement layers; channels 100, 8d, 8d, 4d, 4d, 2d, d, 2.
        Preset::Desk64 => vec![
            (100, 1, 1, 0),
            (8 * d, 4, 1, 0),
            (8 * d, 4, 2, 1),
            (4 * d, 4, 2, 1),
            (4 * d, 4, 2, 1),
            (2 * d, 4, 2, 1),
            (d, 3, 1, 1),
            (2, 3, 1, 1),
        ],
        // 1x1 -> 3 -> 5 -> 10 -> 20 -> 41 -> 85 -> 170 -> 340 -> 340.
        Preset::Paper340 => vec![
            (100, 1, 1, 0),
            (8 * d, 3, 1, 0),
            (8 * d, 3, 1, 0),
            (4 * d, 4, 2, 1),
            (4 * d, 4, 2, 1),
            (4 * d, 3, 2, 0),
            (2 * d, 5, 2, 0),
            (d, 4, 2, 1),
            (d, 4, 2, 1),
            (2, 3, 1, 1),
        ],
    }
}

/// Build a randomly initialized generator. Weights are uniform in [-a, a]
/// with a = sqrt(1/(C_in * k^2)), drawn in a fixed order from a seeded
/// stream, so the same seed always yields the same network.
pub fn build_generator(preset: Preset, d: usize, latent_dim: usize, seed: u64) -> GeneratorParams {
    assert!(d >= 1, "width multiplier must be at least 1");
    assert!(latent_dim >= 1, "latent dimension must be at least 1");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut c_in = latent_dim;
    for (c_out, k, stride, padding) in preset_rows(preset, d) {
        layers.push(init_layer(c_in, c_out, k, stride, padding, &mut rng));
        c_in = c_out;
    }
    let n = layers.len();
    let mut activations = vec![Activation::LeakyRelu(HIDDEN_SLOPE); n - 1];
    activations.push(Activation::Tanh);
    let params = GeneratorParams {
        layers,
        activations,
        latent_dim,
    };
    params.validate();
    params
}

/// Forward intermediates kept for the backward sweep.
pub struct ForwardTape {
    /// Input to each convolution.
    inputs: Vec<Batch>,
    /// Each convolution's output before its activation.
    preacts: Vec<Batch>,
    /// Final post-activation output, 2 channels.
    pub output: Batch,
}

fn latent_input(params: &GeneratorParams, latents: ArrayView2<f64>) -> Batch {
    assert!(latents.nrows() > 0, "empty batch");
    assert_eq!(
        latents.ncols(),
        params.latent_dim,
        "latent length {} does not match generator latent_dim {}",
        latents.ncols(),
        params.latent_dim
    );
    Batch {
        data: latents.t().to_owned(),
        batch: latents.nrows(),
        h: 1,
        w: 1,
    }
}

/// Forward pass over a batch of latents (rows of `latents`), recording the
/// tape needed by `backward_batch`.
pub fn forward_batch(params: &GeneratorParams, latents: ArrayView2<f64>) -> ForwardTape {
    params.validate();
    let mut x = latent_input(params, latents);
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut preacts = Vec::with_capacity(params.layers.len());
    for (layer, act) in params.layers.iter().zip(&params.activations) {
        let pre = conv_transpose2d_batch(&x, layer);
        let post = act.apply_batch(&pre);
        inputs.push(x);
        preacts.push(pre);
        x = post;
    }
    ForwardTape {
        inputs,
        preacts,
        output: x,
    }
}

/// Forward pass that keeps no intermediates (for value-only evaluation).
pub fn forward_values(params: &GeneratorParams, latents: ArrayView2<f64>) -> Batch {
    params.validate();
    let mut x = latent_input(params, latents);
    for (layer, act) in params.layers.iter().zip(&params.activations) {
        x = act.apply_batch(&conv_transpose2d_batch(&x, layer));
    }
    x
}

/// Per-layer gradients with respect to kernels and biases, in layer order.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub kernels: Vec<Array4<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &GeneratorParams) -> Self {
        ParamGrads {
            kernels: params.layers.iter().map(|l| Array4::zeros(l.kernel.dim())).collect(),
            biases: params.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
        }
    }

    /// self += a * other
    pub fn scaled_add(&mut self, a: f64, other: &ParamGrads) {
        for (s, o) in self.kernels.iter_mut().zip(&other.kernels) {
            s.scaled_add(a, o);
        }
        for (s, o) in self.biases.iter_mut().zip(&other.biases) {
            s.scaled_add(a, o);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.kernels.iter().all(|k| k.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Reverse sweep: given d(scalar)/d(output) as `cotangent`, returns gradients
/// for every layer and for the latent batch (one row per sample).
pub fn backward_batch(
    params: &GeneratorParams,
    tape: &ForwardTape,
    cotangent: &Batch,
) -> (ParamGrads, Array2<f64>) {
    assert_eq!(cotangent.data.dim(), tape.output.data.dim(), "cotangent shape mismatch");
    let mut grads = ParamGrads::zeros_like(params);
    let mut cot = cotangent.clone();
    for k in (0..params.layers.len()).rev() {
        let cot_pre = params.activations[k].vjp_batch(&tape.preacts[k], &cot);
        let (d_in, d_kernel, d_bias) =
            conv_transpose2d_vjp_batch(&tape.inputs[k], &params.layers[k], &cot_pre);
        grads.kernels[k] = d_kernel;
        grads.biases[k] = d_bias;
        cot = d_in;
    }
    let d_latents = cot.data.t().to_owned();
    (grads, d_latents)
}

/// Interpret a 2-channel output batch as complex images.
pub fn images_from_output(out: &Batch) -> Vec<ComplexImage> {
    assert_eq!(out.channels(), 2, "expected re/im channel pair");
    assert_eq!(out.h, out.w, "expected square output");
    let n = out.h;
    let re = out.data.row(0);
    let im = out.data.row(1);
    (0..out.batch)
        .map(|b| {
            let mut img = ComplexImage::zeros(n);
            let base = b * n * n;
            for (i, v) in img.values.iter_mut().enumerate() {
                *v = Complex64::new(re[base + i], im[base + i]);
            }
            img
        })
        .collect()
}

fn check_output_range(params: &GeneratorParams, out: &Batch) {
    if *params.activations.last().unwrap() == Activation::Tanh {
        assert!(
            out.data.iter().all(|v| v.abs() <= 1.0 + 1e-6),
            "tanh output left its range"
        );
    }
}

/// Run one latent through the network.
pub fn generate_frame(params: &GeneratorParams, z: &[f64]) -> ComplexImage {
    let latents = Array2::from_shape_vec((1, z.len()), z.to_vec()).unwrap();
    let out = forward_values(params, latents.view());
    check_output_range(params, &out);
    images_from_output(&out).pop().unwrap()
}

/// Run a list of latents through the network; order is preserved.
pub fn generate_batch(params: &GeneratorParams, latents: ArrayView2<f64>) -> ImageSeries {
    assert!(latents.nrows() > 0, "empty batch");
    let out = forward_values(params, latents);
    check_output_range(params, &out);
    images_from_output(&out)
}

/// Central-difference estimate of ||dG/dz||_F^2 at `z`:
/// sum_j ||G(z + h e_j) - G(z - h e_j)||^2 / (2h)^2, counting real and
/// imaginary parts of every pixel.
pub fn jacobian_frobenius_sq(params: &GeneratorParams, z: &[f64], h: f64) -> f64 {
    assert!(h > 0.0, "step must be positive");
    let l = z.len();
    let mut latents = Array2::zeros((2 * l, l));
    for j in 0..l {
        for (i, &v) in z.iter().enumerate() {
            latents[[2 * j, i]] = v;
            latents[[2 * j + 1, i]] = v;
        }
        latents[[2 * j, j]] += h;
        latents[[2 * j + 1, j]] -= h;
    }
    let out = forward_values(params, latents.view());
    let n2 = out.h * out.w;
    let mut total = 0.0;
    for j in 0..l {
        for ch in 0..2 {
            let row = out.data.row(ch);
            let plus = row.slice(ndarray::s![2 * j * n2..(2 * j + 1) * n2]);
            let minus = row.slice(ndarray::s![(2 * j + 1) * n2..(2 * j + 2) * n2]);
            total += plus
                .iter()
                .zip(minus.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    total / (4.0 * h * h)
}

/// Length of the image-space curve traced when the latent moves in a
/// straight line from z1 to z2, approximated on a uniform partition:
/// sum_k ||G(c(s_{k+1})) - G(c(s_k))||.
pub fn path_length(params: &GeneratorParams, z1: &[f64], z2: &[f64], n_steps: usize) -> f64 {
    assert!(n_steps >= 2, "need at least two steps");
    assert_eq!(z1.len(), z2.len());
    let l = z1.len();
    // Evaluate in chunks to bound the size of any single batched forward.
    let chunk = 16;
    let points = n_steps + 1;
    let point = |k: usize| -> Vec<f64> {
        let s = k as f64 / n_steps as f64;
        (0..l).map(|i| z1[i] + (z2[i] - z1[i]) * s).collect()
    };
    let mut total = 0.0;
    let mut prev_last: Option<Vec<f64>> = None; // image at the chunk boundary
    let mut start = 0;
    while start < points {
        let stop = (start + chunk).min(points);
        let mut latents = Array2::zeros((stop - start, l));
        for k in start..stop {
            let p = point(k);
            for i in 0..l {
                latents[[k - start, i]] = p[i];
            }
        }
        let out = forward_values(params, latents.view());
        let n2 = out.h * out.w;
        let flat = |b: usize| -> Vec<f64> {
            let mut v = Vec::with_capacity(2 * n2);
            for ch in 0..2 {
                let row = out.data.row(ch);
                v.extend(row.slice(ndarray::s![b * n2..(b + 1) * n2]).iter());
            }
            v
        };
        for b in 0..(stop - start) {
            let cur = flat(b);
            if let Some(prev) = &prev_last {
                total += prev
                    .iter()
                    .zip(&cur)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
            }
            prev_last = Some(cur);
        }
        start = stop;
    }
    total
}
