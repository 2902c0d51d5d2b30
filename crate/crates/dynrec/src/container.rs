//! Binary containers for datasets and checkpoints.
//!
//! Both formats are little-endian with 32-bit payloads. A dataset file
//! ("GSTM1\0") holds the header (version, N, M, C, S, flags), per-frame
//! trajectories, per-frame per-coil samples, the coil maps, and, when flag
//! bit 0 is set, the ground-truth frames and motion phases. A checkpoint
//! ("GSCK1\0") holds the layer list (dims, stride, padding, activation) with
//! kernels and biases, followed by the latent table.
//!
//! Values are stored as f32, so writing quantizes; a read-back followed by a
//! second write reproduces the first file byte for byte.

use crate::diffops::{Activation, LayerWeights};
use crate::generator::{ComplexImage, GeneratorParams};
use crate::kspace::{CoilMaps, KSpaceFrame, Trajectory};
use crate::phantom::{Dataset, GroundTruth};
use ndarray::{Array1, Array2, Array3, Array4};
use num_complex::Complex64;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const DATASET_MAGIC: &[u8; 6] = b"GSTM1\0";
const CHECKPOINT_MAGIC: &[u8; 6] = b"GSCK1\0";
const VERSION: u32 = 1;

struct Writer<W: Write> {
    inner: W,
    context: String,
}

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> crate::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn f32(&mut self, v: f64) -> crate::Result<()> {
        self.bytes(&(v as f32).to_le_bytes())
    }

    /// Full-precision scalar, for structural constants that are not part of
    /// the 32-bit weight payload.
    fn f64(&mut self, v: f64) -> crate::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn c64(&mut self, v: Complex64) -> crate::Result<()> {
        self.f32(v.re)?;
        self.f32(v.im)
    }

    fn bytes(&mut self, b: &[u8]) -> crate::Result<()> {
        self.inner
            .write_all(b)
            .map_err(|e| crate::Error::io(self.context.clone(), e))
    }
}

struct Reader<R: Read> {
    inner: R,
    context: String,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> crate::Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32(&mut self) -> crate::Result<f64> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(f32::from_le_bytes(b) as f64)
    }

    fn f64(&mut self) -> crate::Result<f64> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn c64(&mut self) -> crate::Result<Complex64> {
        Ok(Complex64::new(self.f32()?, self.f32()?))
    }

    fn exact(&mut self, b: &mut [u8]) -> crate::Result<()> {
        self.inner
            .read_exact(b)
            .map_err(|e| crate::Error::io(self.context.clone(), e))
    }

    fn expect_magic(&mut self, magic: &[u8; 6], what: &str) -> crate::Result<()> {
        let mut b = [0u8; 6];
        self.exact(&mut b)?;
        if &b != magic {
            return Err(crate::Error::Format(format!(
                "{}: not a {what} file (bad magic)",
                self.context
            )));
        }
        Ok(())
    }

    fn expect_end(&mut self) -> crate::Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(crate::Error::Format(format!(
                "{}: trailing bytes after the payload",
                self.context
            ))),
            Err(e) => Err(crate::Error::io(self.context.clone(), e)),
        }
    }
}

fn open_writer(path: &Path) -> crate::Result<Writer<BufWriter<File>>> {
    let context = format!("writing {}", path.display());
    let file = File::create(path).map_err(|e| crate::Error::io(context.clone(), e))?;
    Ok(Writer {
        inner: BufWriter::new(file),
        context,
    })
}

fn open_reader(path: &Path) -> crate::Result<Reader<BufReader<File>>> {
    let context = format!("reading {}", path.display());
    let file = File::open(path).map_err(|e| crate::Error::io(context.clone(), e))?;
    Ok(Reader {
        inner: BufReader::new(file),
        context,
    })
}

/// Serialize a dataset. Every frame must carry the same number of samples
/// (pooled datasets are a training-time construct and are not stored).
pub fn write_dataset(path: &Path, ds: &Dataset) -> crate::Result<()> {
    let m = ds.m();
    if m == 0 {
        return Err(crate::Error::Format("refusing to write an empty dataset".into()));
    }
    let s = ds.frames[0].trajectory.len();
    let c = ds.frames[0].samples.nrows();
    for f in &ds.frames {
        if f.trajectory.len() != s || f.samples.nrows() != c {
            return Err(crate::Error::Format(
                "all frames must share one sample count and coil count".into(),
            ));
        }
    }
    let mut w = open_writer(path)?;
    w.bytes(DATASET_MAGIC)?;
    w.u32(VERSION)?;
    w.u32(ds.n as u32)?;
    w.u32(m as u32)?;
    w.u32(c as u32)?;
    w.u32(s as u32)?;
    w.u32(u32::from(ds.truth.is_some()))?;
    for f in &ds.frames {
        for i in 0..s {
            w.f32(f.trajectory.coords[[i, 0]])?;
            w.f32(f.trajectory.coords[[i, 1]])?;
        }
    }
    for f in &ds.frames {
        for coil in 0..c {
            for i in 0..s {
                w.c64(f.samples[[coil, i]])?;
            }
        }
    }
    for v in ds.coils.maps.iter() {
        w.c64(*v)?;
    }
    if let Some(truth) = &ds.truth {
        if truth.images.len() != m || truth.phases.dim() != (m, 2) {
            return Err(crate::Error::Format("ground truth does not match M".into()));
        }
        for img in &truth.images {
            for v in img.values.iter() {
                w.c64(*v)?;
            }
        }
        for i in 0..m {
            w.f32(truth.phases[[i, 0]])?;
            w.f32(truth.phases[[i, 1]])?;
        }
    }
    w.inner
        .flush()
        .map_err(|e| crate::Error::io(w.context.clone(), e))
}

/// Read a dataset back. Density weights and the derived per-frame caches are
/// rebuilt from the trajectories.
pub fn read_dataset(path: &Path) -> crate::Result<Dataset> {
    let mut r = open_reader(path)?;
    r.expect_magic(DATASET_MAGIC, "dataset")?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(crate::Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;
    let c = r.u32()? as usize;
    let s = r.u32()? as usize;
    let flags = r.u32()?;
    if m == 0 || c == 0 || s == 0 || n == 0 {
        return Err(crate::Error::Format("dataset header has zero dimensions".into()));
    }
    let mut trajectories = Vec::with_capacity(m);
    for _ in 0..m {
        let mut coords = Array2::zeros((s, 2));
        for i in 0..s {
            coords[[i, 0]] = r.f32()?;
            coords[[i, 1]] = r.f32()?;
        }
        trajectories.push(Trajectory::new(coords)?);
    }
    let mut frames = Vec::with_capacity(m);
    for traj in trajectories {
        let mut samples = Array2::zeros((c, s));
        for coil in 0..c {
            for i in 0..s {
                samples[[coil, i]] = r.c64()?;
            }
        }
        frames.push(KSpaceFrame::new(traj, samples)?);
    }
    let mut maps = Array3::zeros((c, n, n));
    for v in maps.iter_mut() {
        *v = r.c64()?;
    }
    let coils = CoilMaps::new(maps)?;
    let truth = if flags & 1 != 0 {
        let mut images = Vec::with_capacity(m);
        for _ in 0..m {
            let mut img = ComplexImage::zeros(n);
            for v in img.values.iter_mut() {
                *v = r.c64()?;
            }
            images.push(img);
        }
        let mut phases = Array2::zeros((m, 2));
        for i in 0..m {
            phases[[i, 0]] = r.f32()?;
            phases[[i, 1]] = r.f32()?;
        }
        Some(GroundTruth { images, phases })
    } else {
        None
    };
    r.expect_end()?;
    Ok(Dataset {
        frames,
        coils,
        truth,
        n,
    })
}

fn activation_tag(a: &Activation) -> (u32, f64) {
    match a {
        Activation::LeakyRelu(slope) => (0, *slope),
        Activation::Tanh => (1, 0.0),
        Activation::Identity => (2, 0.0),
    }
}

fn activation_from_tag(tag: u32, param: f64) -> crate::Result<Activation> {
    match tag {
        0 => Ok(Activation::LeakyRelu(param)),
        1 => Ok(Activation::Tanh),
        2 => Ok(Activation::Identity),
        other => Err(crate::Error::Format(format!("unknown activation tag {other}"))),
    }
}

/// Serialize the network and the latent table.
pub fn write_checkpoint(
    path: &Path,
    params: &GeneratorParams,
    z: &Array2<f64>,
) -> crate::Result<()> {
    let mut w = open_writer(path)?;
    w.bytes(CHECKPOINT_MAGIC)?;
    w.u32(VERSION)?;
    w.u32(params.layers.len() as u32)?;
    w.u32(params.latent_dim as u32)?;
    w.u32(z.nrows() as u32)?;
    w.u32(z.ncols() as u32)?;
    for (layer, act) in params.layers.iter().zip(&params.activations) {
        let (tag, param) = activation_tag(act);
        w.u32(layer.c_in() as u32)?;
        w.u32(layer.c_out() as u32)?;
        w.u32(layer.ksize() as u32)?;
        w.u32(layer.stride as u32)?;
        w.u32(layer.padding as u32)?;
        w.u32(tag)?;
        w.f64(param)?;
    }
    for layer in &params.layers {
        for v in layer.kernel.iter() {
            w.f32(*v)?;
        }
        for v in layer.bias.iter() {
            w.f32(*v)?;
        }
    }
    for v in z.iter() {
        w.f32(*v)?;
    }
    w.inner
        .flush()
        .map_err(|e| crate::Error::io(w.context.clone(), e))
}

/// Read a checkpoint back into a runnable network and its latents.
pub fn read_checkpoint(path: &Path) -> crate::Result<(GeneratorParams, Array2<f64>)> {
    let mut r = open_reader(path)?;
    r.expect_magic(CHECKPOINT_MAGIC, "checkpoint")?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(crate::Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let n_layers = r.u32()? as usize;
    let latent_dim = r.u32()? as usize;
    let z_rows = r.u32()? as usize;
    let z_cols = r.u32()? as usize;
    if n_layers == 0 {
        return Err(crate::Error::Format("checkpoint has no layers".into()));
    }
    let mut dims = Vec::with_capacity(n_layers);
    let mut activations = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let c_in = r.u32()? as usize;
        let c_out = r.u32()? as usize;
        let k = r.u32()? as usize;
        let stride = r.u32()? as usize;
        let padding = r.u32()? as usize;
        let tag = r.u32()?;
        let param = r.f64()?;
        dims.push((c_in, c_out, k, stride, padding));
        activations.push(activation_from_tag(tag, param)?);
    }
    let mut layers = Vec::with_capacity(n_layers);
    for &(c_in, c_out, k, stride, padding) in &dims {
        let mut kernel = Array4::zeros((c_in, c_out, k, k));
        for v in kernel.iter_mut() {
            *v = r.f32()?;
        }
        let mut bias = Array1::zeros(c_out);
        for v in bias.iter_mut() {
            *v = r.f32()?;
        }
        layers.push(LayerWeights {
            kernel,
            bias,
            stride,
            padding,
        });
    }
    let mut z = Array2::zeros((z_rows, z_cols));
    for v in z.iter_mut() {
        *v = r.f32()?;
    }
    r.expect_end()?;
    let params = GeneratorParams {
        layers,
        activations,
        latent_dim,
    };
    params.check_consistent()?;
    if z_cols != latent_dim {
        return Err(crate::Error::ShapeMismatch(format!(
            "latent table is {z_cols}-wide but the network takes {latent_dim}"
        )));
    }
    Ok((params, z))
}
