//! Result export: 16-bit PGM magnitude images, per-epoch loss and latent
//! CSV tables, and the evaluation report in a flat CSV form that parses
//! back to the same values.

use crate::generator::ImageSeries;
use crate::metrics::EvalReport;
use crate::trainer::EpochLog;
use ndarray::{Array2, ArrayView2};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

fn io_err(path: &Path, e: std::io::Error) -> crate::Error {
    crate::Error::io(format!("writing {}", path.display()), e)
}

/// One magnitude image as a binary 16-bit PGM (P5, maxval 65535, big-endian
/// samples). `peak` fixes the value mapped to 65535 so a series shares one
/// scale.
pub fn write_pgm(path: &Path, magnitudes: ArrayView2<f64>, peak: f64) -> crate::Result<()> {
    assert!(peak > 0.0, "peak must be positive");
    let (h, w) = magnitudes.dim();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{w} {h}\n65535\n").map_err(|e| io_err(path, e))?;
    for v in magnitudes.iter() {
        let scaled = (v / peak * 65535.0).round().clamp(0.0, 65535.0) as u16;
        out.write_all(&scaled.to_be_bytes()).map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Export every frame's magnitude as frame_NNN.pgm under `dir`, scaled to
/// the series-wide maximum.
pub fn write_magnitude_series(dir: &Path, series: &ImageSeries) -> crate::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let peak = series
        .iter()
        .flat_map(|f| f.values.iter())
        .map(|v| v.norm())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    for (i, frame) in series.iter().enumerate() {
        let mag = frame.values.mapv(|v| v.norm());
        write_pgm(&dir.join(format!("frame_{i:03}.pgm")), mag.view(), peak)?;
    }
    Ok(())
}

/// Append-friendly writer for the per-epoch loss table, so partially
/// completed runs still leave a usable log behind.
pub struct LossCsv {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl LossCsv {
    pub fn create(path: &Path) -> crate::Result<Self> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "level,epoch,data,distance,latent,total,wall_secs")
            .map_err(|e| io_err(path, e))?;
        out.flush().map_err(|e| io_err(path, e))?;
        Ok(LossCsv {
            out,
            path: path.to_path_buf(),
        })
    }

    pub fn push(&mut self, log: &EpochLog) -> crate::Result<()> {
        let b = &log.breakdown;
        writeln!(
            self.out,
            "{},{},{},{},{},{},{}",
            log.level, log.epoch, b.data, b.distance, b.latent, b.total, log.wall_secs
        )
        .map_err(|e| io_err(&self.path, e))?;
        self.out.flush().map_err(|e| io_err(&self.path, e))
    }
}

/// Latent table: one row per frame, columns z1..zL.
pub fn write_latent_csv(path: &Path, z: ArrayView2<f64>) -> crate::Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let header: Vec<String> = (1..=z.ncols()).map(|j| format!("z{j}")).collect();
    writeln!(out, "frame,{}", header.join(",")).map_err(|e| io_err(path, e))?;
    for (i, row) in z.rows().into_iter().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{i},{}", vals.join(",")).map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Parse a latent table written by [`write_latent_csv`].
pub fn read_latent_csv(path: &Path) -> crate::Result<Array2<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| crate::Error::io(format!("reading {}", path.display()), e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let mut row = Vec::with_capacity(fields.len() - 1);
        for f in &fields[1..] {
            row.push(f.parse::<f64>().map_err(|_| {
                crate::Error::Format(format!("{}: bad number `{f}` on line {}", path.display(), i + 1))
            })?);
        }
        rows.push(row);
    }
    let cols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != cols) || cols == 0 {
        return Err(crate::Error::Format(format!(
            "{}: ragged latent table",
            path.display()
        )));
    }
    let flat: Vec<f64> = rows.concat();
    Array2::from_shape_vec((flat.len() / cols, cols), flat)
        .map_err(|e| crate::Error::Format(format!("latent table shape: {e}")))
}

/// Flat evaluation report: rows of kind,index,name,value. Summary rows have
/// an empty index; per-frame rows carry the frame number.
pub fn write_eval_csv(
    path: &Path,
    report: &EvalReport,
    extra_summary: &[(&str, f64)],
) -> crate::Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "kind,index,name,value").map_err(|e| io_err(path, e))?;
    let mut summary: Vec<(String, f64)> = vec![
        ("ser_db".into(), report.ser_db),
        ("psnr_db".into(), report.psnr_db),
        ("ssim".into(), report.ssim),
    ];
    if let Some((c, r)) = report.latent_alignment {
        summary.push(("corr_cardiac".into(), c));
        summary.push(("corr_resp".into(), r));
    }
    for (name, value) in extra_summary {
        summary.push(((*name).to_string(), *value));
    }
    for (name, value) in &summary {
        writeln!(out, "summary,,{name},{value}").map_err(|e| io_err(path, e))?;
    }
    for (name, series) in [
        ("ser_db", &report.ser_series),
        ("psnr_db", &report.psnr_series),
        ("ssim", &report.ssim_series),
    ] {
        for (i, v) in series.iter().enumerate() {
            writeln!(out, "frame,{i},{name},{v}").map_err(|e| io_err(path, e))?;
        }
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Parsed-back report rows: (kind, index, name, value).
pub fn read_eval_csv(path: &Path) -> crate::Result<Vec<(String, Option<usize>, String, f64)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| crate::Error::io(format!("reading {}", path.display()), e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(crate::Error::Format(format!(
                "{}: expected 4 fields on line {}",
                path.display(),
                i + 1
            )));
        }
        let index = if parts[1].is_empty() {
            None
        } else {
            Some(parts[1].parse::<usize>().map_err(|_| {
                crate::Error::Format(format!("{}: bad index on line {}", path.display(), i + 1))
            })?)
        };
        let value = parts[3].parse::<f64>().map_err(|_| {
            crate::Error::Format(format!("{}: bad value on line {}", path.display(), i + 1))
        })?;
        rows.push((parts[0].to_string(), index, parts[2].to_string(), value));
    }
    Ok(rows)
}

/// Pull one summary value out of a parsed report.
pub fn summary_value(
    rows: &[(String, Option<usize>, String, f64)],
    name: &str,
) -> Option<f64> {
    rows.iter()
        .find(|(kind, idx, n, _)| kind == "summary" && idx.is_none() && n == name)
        .map(|(_, _, _, v)| *v)
}
