//! Differentiable building blocks for the image generator: transposed 2-d
//! convolution, leaky ReLU and tanh activations, each with a hand-written
//! vector-Jacobian product.
//!
//! The generator is a fixed feed-forward chain, so reverse-mode gradients are
//! a plain backward sweep over these primitives; no tape or graph machinery.
//!
//! Transposed convolution follows the standard definition: every input pixel
//! scatters `kernel * value` into the output at stride offsets, then the
//! output is cropped by `padding` on each border:
//!
//! ```text
//! out[co, yi*s - p + dy, xi*s - p + dx] += k[ci, co, dy, dx] * in[ci, yi, xi]
//! H_out = (H_in - 1) * s - 2p + k
//! ```
//!
//! Internally both forward and backward are expressed as one GEMM plus a
//! col2im / im2col pass, over a whole batch of inputs at once. The per-sample
//! entry points are thin wrappers around the batched kernels, so there is a
//! single arithmetic path to test.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;

/// One activation map: real values indexed (channel, row, column).
#[derive(Clone, Debug)]
pub struct Tensor {
    pub data: Array3<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            data: Array3::zeros((c, h, w)),
        }
    }

    pub fn from_array(data: Array3<f64>) -> Self {
        Tensor { data }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Weights of a single transposed-convolution layer.
///
/// Kernel layout is (C_in, C_out, k, k); kernels are square.
#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub kernel: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl LayerWeights {
    pub fn c_in(&self) -> usize {
        self.kernel.dim().0
    }

    pub fn c_out(&self) -> usize {
        self.kernel.dim().1
    }

    pub fn ksize(&self) -> usize {
        self.kernel.dim().2
    }

    /// Spatial output size for a given input size.
    pub fn out_size(&self, in_size: usize) -> usize {
        let up = (in_size - 1) * self.stride + self.ksize();
        assert!(
            up > 2 * self.padding,
            "padding {} swallows the whole {}-wide output",
            self.padding,
            up
        );
        up - 2 * self.padding
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

/// Fan-in scaled uniform initialization: U[-a, a] with a = sqrt(1/(C_in*k^2)).
///
/// Draw order is fixed (kernel in standard layout, then bias) so a seeded RNG
/// reproduces weights exactly.
pub fn init_layer<R: Rng>(
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    rng: &mut R,
) -> LayerWeights {
    assert!(c_in >= 1 && c_out >= 1 && k >= 1 && stride >= 1);
    let a = (1.0 / (c_in as f64 * (k * k) as f64)).sqrt();
    let mut kernel = Array4::zeros((c_in, c_out, k, k));
    for v in kernel.iter_mut() {
        *v = rng.gen_range(-a..=a);
    }
    let mut bias = Array1::zeros(c_out);
    for v in bias.iter_mut() {
        *v = rng.gen_range(-a..=a);
    }
    LayerWeights {
        kernel,
        bias,
        stride,
        padding,
    }
}

/// A batch of equally shaped activation maps packed as a matrix:
/// row = channel, column = (sample, row, col) with the sample index outermost.
///
/// This is the layout the GEMM path works in; `from_tensors` / `to_tensors`
/// convert at the edges.
#[derive(Clone, Debug)]
pub struct Batch {
    pub data: Array2<f64>,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
}

impl Batch {
    pub fn zeros(c: usize, batch: usize, h: usize, w: usize) -> Self {
        Batch {
            data: Array2::zeros((c, batch * h * w)),
            batch,
            h,
            w,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Self {
        assert!(!tensors.is_empty(), "empty batch");
        let (c, h, w) = tensors[0].data.dim();
        let mut out = Batch::zeros(c, tensors.len(), h, w);
        for (b, t) in tensors.iter().enumerate() {
            assert_eq!(t.data.dim(), (c, h, w), "ragged batch");
            for ch in 0..c {
                let mut row = out.data.row_mut(ch);
                let src = t.data.index_axis(ndarray::Axis(0), ch);
                row.slice_mut(ndarray::s![b * h * w..(b + 1) * h * w])
                    .assign(&src.to_shape(h * w).unwrap());
            }
        }
        out
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let c = self.channels();
        (0..self.batch)
            .map(|b| {
                let mut t = Tensor::zeros(c, self.h, self.w);
                for ch in 0..c {
                    let row = self.data.row(ch);
                    let src = row.slice(ndarray::s![b * self.h * self.w..(b + 1) * self.h * self.w]);
                    t.data
                        .index_axis_mut(ndarray::Axis(0), ch)
                        .assign(&src.to_shape((self.h, self.w)).unwrap());
                }
                t
            })
            .collect()
    }
}

fn kernel_as_matrix(w: &LayerWeights) -> ndarray::ArrayView2<'_, f64> {
    let (c_in, c_out, k, _) = w.kernel.dim();
    w.kernel
        .view()
        .into_shape_with_order((c_in, c_out * k * k))
        .expect("kernel is contiguous")
}

/// `dot` may hand back an F-order result when an operand is transposed; the
/// scatter/gather loops below index raw row-major slices, so force C order.
fn to_row_major(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        let dim = a.dim();
        Array2::from_shape_vec(dim, a.iter().copied().collect()).unwrap()
    }
}

/// Batched transposed convolution: GEMM into column form, then scatter-add
/// (col2im) into the padded-cropped output, then bias.
/// Input-index window that keeps a transposed-convolution tap in bounds.
///
/// For tap offset `d`, input index `i` touches output index `i*s - p + d`.
/// Returns the inclusive input range whose outputs land in `[0, n_out)`
/// together with the output index of the first element, or `None` when the
/// window is empty. Hoisting this out of the scatter/gather loops removes the
/// per-element bounds branch on the hot path.
fn tap_range(d: usize, p: isize, s: usize, n_in: usize, n_out: usize) -> Option<(usize, usize, usize)> {
    let off = d as isize - p;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(s)
    };
    let hi_num = n_out as isize - 1 - off;
    if hi_num < 0 {
        return None;
    }
    let hi = (hi_num as usize / s).min(n_in - 1);
    if lo > hi {
        return None;
    }
    Some((lo, hi, ((lo * s) as isize + off) as usize))
}

pub fn conv_transpose2d_batch(input: &Batch, w: &LayerWeights) -> Batch {
    let c_in = w.c_in();
    let c_out = w.c_out();
    let k = w.ksize();
    let s = w.stride;
    let p = w.padding as isize;
    assert_eq!(
        input.channels(),
        c_in,
        "input has {} channels, layer expects {}",
        input.channels(),
        c_in
    );
    let (h_in, w_in) = (input.h, input.w);
    let h_out = w.out_size(h_in);
    let w_out = w.out_size(w_in);
    let nb = input.batch;

    // (c_out*k*k, nb*h_in*w_in)
    let cols = to_row_major(kernel_as_matrix(w).t().dot(&input.data));

    let mut out = Batch::zeros(c_out, nb, h_out, w_out);
    let in_hw = h_in * w_in;
    let out_hw = h_out * w_out;
    let cols_slice = cols.as_slice().expect("dot output is contiguous");
    let out_slice = out.data.as_slice_mut().expect("contiguous");
    for co in 0..c_out {
        let out_base = co * nb * out_hw;
        for dy in 0..k {
            let Some((yi_lo, yi_hi, yo_lo)) = tap_range(dy, p, s, h_in, h_out) else {
                continue;
            };
            for dx in 0..k {
                let Some((xi_lo, xi_hi, xo_lo)) = tap_range(dx, p, s, w_in, w_out) else {
                    continue;
                };
                let row = &cols_slice[(co * k * k + dy * k + dx) * nb * in_hw..][..nb * in_hw];
                let len = xi_hi - xi_lo + 1;
                for b in 0..nb {
                    for yi in yi_lo..=yi_hi {
                        let yo = yo_lo + (yi - yi_lo) * s;
                        let src = &row[b * in_hw + yi * w_in + xi_lo..][..len];
                        let dst_start = out_base + b * out_hw + yo * w_out + xo_lo;
                        if s == 1 {
                            let dst = &mut out_slice[dst_start..][..len];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            let dst = &mut out_slice[dst_start..][..(len - 1) * s + 1];
                            for (i, &v) in src.iter().enumerate() {
                                dst[i * s] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    for co in 0..c_out {
        let b = w.bias[co];
        out.data.row_mut(co).mapv_inplace(|v| v + b);
    }
    out
}

/// Gradients of `<cotangent, conv_transpose2d_batch(input, w)>` with respect
/// to input, kernel and bias.
///
/// The gather (im2col) of the cotangent turns both remaining gradients into
/// GEMMs: dInput = K * cols, dKernel = input * cols^T.
pub fn conv_transpose2d_vjp_batch(
    input: &Batch,
    w: &LayerWeights,
    cotangent: &Batch,
) -> (Batch, Array4<f64>, Array1<f64>) {
    let c_in = w.c_in();
    let c_out = w.c_out();
    let k = w.ksize();
    let s = w.stride;
    let p = w.padding as isize;
    let (h_in, w_in) = (input.h, input.w);
    let h_out = w.out_size(h_in);
    let w_out = w.out_size(w_in);
    let nb = input.batch;
    assert_eq!(input.channels(), c_in, "input channel mismatch");
    assert_eq!(cotangent.channels(), c_out, "cotangent channel mismatch");
    assert_eq!(
        (cotangent.batch, cotangent.h, cotangent.w),
        (nb, h_out, w_out),
        "cotangent shape does not match forward output"
    );

    let mut d_bias = Array1::zeros(c_out);
    for co in 0..c_out {
        d_bias[co] = cotangent.data.row(co).sum();
    }

    // Gather cotangent taps: cols[co*k*k + dy*k + dx, (b,yi,xi)] = cot[co, yo, xo]
    let in_hw = h_in * w_in;
    let out_hw = h_out * w_out;
    let mut cols = Array2::<f64>::zeros((c_out * k * k, nb * in_hw));
    let cot_slice = cotangent.data.as_slice().expect("contiguous");
    let cols_slice = cols.as_slice_mut().expect("contiguous");
    for co in 0..c_out {
        let cot_base = co * nb * out_hw;
        for dy in 0..k {
            let Some((yi_lo, yi_hi, yo_lo)) = tap_range(dy, p, s, h_in, h_out) else {
                continue;
            };
            for dx in 0..k {
                let Some((xi_lo, xi_hi, xo_lo)) = tap_range(dx, p, s, w_in, w_out) else {
                    continue;
                };
                let row = &mut cols_slice[(co * k * k + dy * k + dx) * nb * in_hw..][..nb * in_hw];
                let len = xi_hi - xi_lo + 1;
                for b in 0..nb {
                    for yi in yi_lo..=yi_hi {
                        let yo = yo_lo + (yi - yi_lo) * s;
                        let src_start = cot_base + b * out_hw + yo * w_out + xo_lo;
                        let dst = &mut row[b * in_hw + yi * w_in + xi_lo..][..len];
                        if s == 1 {
                            dst.copy_from_slice(&cot_slice[src_start..][..len]);
                        } else {
                            let src = &cot_slice[src_start..][..(len - 1) * s + 1];
                            for (i, slot) in dst.iter_mut().enumerate() {
                                *slot = src[i * s];
                            }
                        }
                    }
                }
            }
        }
    }

    let d_input = Batch {
        data: to_row_major(kernel_as_matrix(w).dot(&cols)),
        batch: nb,
        h: h_in,
        w: w_in,
    };
    let d_kernel_mat = to_row_major(input.data.dot(&cols.t()));
    let d_kernel = d_kernel_mat
        .into_shape_with_order((c_in, c_out, k, k))
        .expect("shape");
    (d_input, d_kernel, d_bias)
}

/// Transposed convolution of a single activation map.
pub fn conv_transpose2d(input: &Tensor, w: &LayerWeights) -> Tensor {
    assert!(input.is_finite(), "non-finite input to conv_transpose2d");
    let batch = Batch::from_tensors(std::slice::from_ref(input));
    conv_transpose2d_batch(&batch, w).to_tensors().pop().unwrap()
}

/// Single-sample VJP; see the batched variant for the math.
pub fn conv_transpose2d_vjp(
    input: &Tensor,
    w: &LayerWeights,
    cotangent: &Tensor,
) -> (Tensor, Array4<f64>, Array1<f64>) {
    let ib = Batch::from_tensors(std::slice::from_ref(input));
    let cb = Batch::from_tensors(std::slice::from_ref(cotangent));
    let (di, dk, db) = conv_transpose2d_vjp_batch(&ib, w, &cb);
    (di.to_tensors().pop().unwrap(), dk, db)
}

/// Elementwise nonlinearity applied after a layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply_batch(&self, x: &Batch) -> Batch {
        let mut out = x.clone();
        match *self {
            Activation::LeakyRelu(slope) => {
                assert!(slope > 0.0 && slope < 1.0, "slope must be in (0, 1)");
                out.data.mapv_inplace(|v| leaky_relu_scalar(v, slope));
            }
            Activation::Tanh => out.data.mapv_inplace(f64::tanh),
            Activation::Identity => {}
        }
        out
    }

    /// Pull a cotangent back through the activation, given the pre-activation
    /// input that was fed forward.
    pub fn vjp_batch(&self, x: &Batch, cotangent: &Batch) -> Batch {
        assert_eq!(x.data.dim(), cotangent.data.dim(), "shape mismatch");
        let mut out = cotangent.clone();
        match *self {
            Activation::LeakyRelu(slope) => {
                out.data.zip_mut_with(&x.data, |c, &v| {
                    if v < 0.0 {
                        *c *= slope;
                    }
                });
            }
            Activation::Tanh => {
                out.data.zip_mut_with(&x.data, |c, &v| {
                    let y = v.tanh();
                    *c *= 1.0 - y * y;
                });
            }
            Activation::Identity => {}
        }
        out
    }
}

pub fn leaky_relu_scalar(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// y = x for x >= 0, slope*x otherwise.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    assert!(slope > 0.0 && slope < 1.0, "slope must be in (0, 1)");
    Tensor {
        data: x.data.mapv(|v| leaky_relu_scalar(v, slope)),
    }
}

/// Cotangent scaled by 1 on the non-negative side, slope on the negative.
/// The kink at exactly 0 takes the identity-side factor 1.
pub fn leaky_relu_vjp(x: &Tensor, cotangent: &Tensor, slope: f64) -> Tensor {
    assert_eq!(x.data.dim(), cotangent.data.dim(), "shape mismatch");
    let mut out = cotangent.data.clone();
    out.zip_mut_with(&x.data, |c, &v| {
        if v < 0.0 {
            *c *= slope;
        }
    });
    Tensor { data: out }
}

pub fn tanh_act(x: &Tensor) -> Tensor {
    Tensor {
        data: x.data.mapv(f64::tanh),
    }
}

/// VJP factor (1 - tanh(x)^2).
pub fn tanh_act_vjp(x: &Tensor, cotangent: &Tensor) -> Tensor {
    assert_eq!(x.data.dim(), cotangent.data.dim(), "shape mismatch");
    let mut out = cotangent.data.clone();
    out.zip_mut_with(&x.data, |c, &v| {
        let y = v.tanh();
        *c *= 1.0 - y * y;
    });
    Tensor { data: out }
}
