//! Reconstruction quality scores: signal-to-error ratio on the complex
//! series, PSNR and SSIM on normalized magnitudes, and a linear-fit check of
//! how well the learned latents track the true motion phases.

use crate::generator::ImageSeries;
use ndarray::{Array2, ArrayView2};

/// Everything the evaluate command reports for one reconstruction.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub ser_db: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub ser_series: Vec<f64>,
    pub psnr_series: Vec<f64>,
    pub ssim_series: Vec<f64>,
    /// (cardiac, respiratory); absent when no phases were available
    pub latent_alignment: Option<(f64, f64)>,
}

/// Errors shared by all pairwise metrics.
fn check_pair(reference: &ImageSeries, recon: &ImageSeries) -> crate::Result<()> {
    if reference.len() != recon.len() {
        return Err(crate::Error::ShapeMismatch(format!(
            "series lengths differ: {} vs {}",
            reference.len(),
            recon.len()
        )));
    }
    if reference.is_empty() {
        return Err(crate::Error::ShapeMismatch("empty series".into()));
    }
    for (a, b) in reference.iter().zip(recon) {
        if a.values.dim() != b.values.dim() {
            return Err(crate::Error::ShapeMismatch(format!(
                "frame shapes differ: {:?} vs {:?}",
                a.values.dim(),
                b.values.dim()
            )));
        }
    }
    Ok(())
}

/// Errors above this ratio of the signal norm count as exact recovery.
const EXACT_FLOOR: f64 = 1e-15;
/// Cap reported when the error is at or below the floor.
pub const DB_CAP: f64 = 300.0;

fn ser_from_norms(ref_sq: f64, err_sq: f64) -> f64 {
    let rn = ref_sq.sqrt();
    let en = err_sq.sqrt();
    if en <= EXACT_FLOOR * rn {
        DB_CAP
    } else {
        20.0 * (rn / en).log10()
    }
}

/// Signal-to-error ratio in dB over the whole complex series.
pub fn ser(reference: &ImageSeries, recon: &ImageSeries) -> crate::Result<f64> {
    check_pair(reference, recon)?;
    let mut ref_sq = 0.0;
    let mut err_sq = 0.0;
    for (a, b) in reference.iter().zip(recon) {
        ref_sq += a.values.iter().map(|v| v.norm_sqr()).sum::<f64>();
        err_sq += a
            .values
            .iter()
            .zip(b.values.iter())
            .map(|(x, y)| (x - y).norm_sqr())
            .sum::<f64>();
    }
    if ref_sq == 0.0 {
        return Err(crate::Error::Format("reference series has zero norm".into()));
    }
    Ok(ser_from_norms(ref_sq, err_sq))
}

/// Per-frame signal-to-error ratios.
pub fn ser_series(reference: &ImageSeries, recon: &ImageSeries) -> crate::Result<Vec<f64>> {
    check_pair(reference, recon)?;
    reference
        .iter()
        .zip(recon)
        .map(|(a, b)| {
            let ref_sq = a.values.iter().map(|v| v.norm_sqr()).sum::<f64>();
            let err_sq = a
                .values
                .iter()
                .zip(b.values.iter())
                .map(|(x, y)| (x - y).norm_sqr())
                .sum::<f64>();
            if ref_sq == 0.0 {
                return Err(crate::Error::Format("reference frame has zero norm".into()));
            }
            Ok(ser_from_norms(ref_sq, err_sq))
        })
        .collect()
}

/// Magnitude images of both series, normalized by the reference's global
/// maximum (so the dynamic range is 1).
fn normalized_magnitudes(
    reference: &ImageSeries,
    recon: &ImageSeries,
) -> crate::Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
    check_pair(reference, recon)?;
    let peak = reference
        .iter()
        .flat_map(|f| f.values.iter())
        .map(|v| v.norm())
        .fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(crate::Error::Format("reference series has zero norm".into()));
    }
    let norm = |s: &ImageSeries| -> Vec<Array2<f64>> {
        s.iter().map(|f| f.values.mapv(|v| v.norm() / peak)).collect()
    };
    Ok((norm(reference), norm(recon)))
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= EXACT_FLOOR * EXACT_FLOOR {
        DB_CAP
    } else {
        -10.0 * mse.log10()
    }
}

/// Peak signal-to-noise ratio in dB on normalized magnitudes, pooled over
/// the series.
pub fn psnr(reference: &ImageSeries, recon: &ImageSeries) -> crate::Result<f64> {
    let (a, b) = normalized_magnitudes(reference, recon)?;
    let mut sq = 0.0;
    let mut count = 0usize;
    for (x, y) in a.iter().zip(&b) {
        sq += x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        count += x.len();
    }
    Ok(psnr_from_mse(sq / count as f64))
}

/// Per-frame PSNR, sharing the series-wide normalization.
pub fn psnr_series(reference: &ImageSeries, recon: &ImageSeries) -> crate::Result<Vec<f64>> {
    let (a, b) = normalized_magnitudes(reference, recon)?;
    Ok(a.iter()
        .zip(&b)
        .map(|(x, y)| {
            let sq: f64 = x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
            psnr_from_mse(sq / x.len() as f64)
        })
        .collect())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        *t = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *t;
    }
    for t in taps.iter_mut() {
        *t /= sum;
    }
    taps
}

/// Separable valid-region Gaussian filter: output is (H-10) x (W-10).
fn gaussian_filter_valid(img: &Array2<f64>) -> Array2<f64> {
    let taps = gaussian_taps();
    let (h, w) = img.dim();
    assert!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "image smaller than the SSIM window"
    );
    let mut rows = Array2::zeros((h, w - SSIM_WINDOW + 1));
    for y in 0..h {
        for x in 0..w - SSIM_WINDOW + 1 {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * img[[y, x + k]];
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1));
    for y in 0..h - SSIM_WINDOW + 1 {
        for x in 0..w - SSIM_WINDOW + 1 {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * rows[[y + k, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn ssim_one(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1; // dynamic range is 1 after normalization
    let c2 = SSIM_K2 * SSIM_K2;
    let mu_x = gaussian_filter_valid(x);
    let mu_y = gaussian_filter_valid(y);
    let xx = gaussian_filter_valid(&(x * x));
    let yy = gaussian_filter_valid(&(y * y));
    let xy = gaussian_filter_valid(&(x * y));
    let mut sum = 0.0;
    for ((i, j), &mx) in mu_x.indexed_iter() {
        let my = mu_y[[i, j]];
        let vx = xx[[i, j]] - mx * mx;
        let vy = yy[[i, j]] - my * my;
        let cov = xy[[i, j]] - mx * my;
        sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    sum / mu_x.len() as f64
}

/// Mean structural similarity over the series, on normalized magnitudes,
/// with an 11x11 Gaussian window (sigma 1.5) and the usual stabilizers.
pub fn ssim(reference: &ImageSeries, recon: &ImageSeries) -> crate::Result<f64> {
    let series = ssim_series(reference, recon)?;
    Ok(series.iter().sum::<f64>() / series.len() as f64)
}

/// Per-frame SSIM, sharing the series-wide normalization.
pub fn ssim_series(reference: &ImageSeries, recon: &ImageSeries) -> crate::Result<Vec<f64>> {
    let (a, b) = normalized_magnitudes(reference, recon)?;
    Ok(a.iter().zip(&b).map(|(x, y)| ssim_one(x, y)).collect())
}

/// Solve the 3x3 system a w = rhs by Gaussian elimination with partial
/// pivoting; None when (numerically) singular.
fn solve3(mut a: [[f64; 3]; 3], mut rhs: [f64; 3]) -> Option<[f64; 3]> {
    let scale = a
        .iter()
        .flatten()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut w = [0.0; 3];
    for col in (0..3).rev() {
        let mut acc = rhs[col];
        for k in col + 1..3 {
            acc -= a[col][k] * w[k];
        }
        w[col] = acc / a[col][col];
    }
    Some(w)
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx <= 1e-24 || vy <= 1e-24 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// How well an affine map of the latents explains the true motion phases:
/// fit [Z, 1] -> phases by least squares, return the Pearson correlation of
/// prediction vs truth per component (cardiac, respiratory). The affine fit
/// makes the score invariant to any invertible re-parameterization of the
/// latent plane.
pub fn latent_alignment(z: ArrayView2<f64>, phases: ArrayView2<f64>) -> (f64, f64) {
    let m = z.nrows();
    assert!(m >= 8, "need at least 8 frames to fit the alignment");
    assert_eq!(z.ncols(), 2);
    assert_eq!(phases.dim(), (m, 2));
    // normal equations for the design matrix [z1, z2, 1]
    let mut xtx = [[0.0f64; 3]; 3];
    for i in 0..m {
        let row = [z[[i, 0]], z[[i, 1]], 1.0];
        for a in 0..3 {
            for b in 0..3 {
                xtx[a][b] += row[a] * row[b];
            }
        }
    }
    let mut out = [0.0f64; 2];
    for comp in 0..2 {
        let mut xty = [0.0f64; 3];
        for i in 0..m {
            let row = [z[[i, 0]], z[[i, 1]], 1.0];
            for a in 0..3 {
                xty[a] += row[a] * phases[[i, comp]];
            }
        }
        out[comp] = match solve3(xtx, xty) {
            None => 0.0,
            Some(w) => {
                let pred: Vec<f64> = (0..m)
                    .map(|i| w[0] * z[[i, 0]] + w[1] * z[[i, 1]] + w[2])
                    .collect();
                let truth: Vec<f64> = (0..m).map(|i| phases[[i, comp]]).collect();
                pearson(&pred, &truth)
            }
        };
    }
    (out[0], out[1])
}

/// Bundle every score for one reconstruction.
pub fn evaluate(
    reference: &ImageSeries,
    recon: &ImageSeries,
    z: Option<ArrayView2<f64>>,
    phases: Option<ArrayView2<f64>>,
) -> crate::Result<EvalReport> {
    Ok(EvalReport {
        ser_db: ser(reference, recon)?,
        psnr_db: psnr(reference, recon)?,
        ssim: ssim(reference, recon)?,
        ser_series: ser_series(reference, recon)?,
        psnr_series: psnr_series(reference, recon)?,
        ssim_series: ssim_series(reference, recon)?,
        latent_alignment: match (z, phases) {
            (Some(z), Some(p)) => Some(latent_alignment(z, p)),
            _ => None,
        },
    })
}
