//! Command-line front end: `simulate` makes a phantom dataset, `reconstruct`
//! fits the generator and latents to a dataset, `evaluate` scores a
//! checkpoint against the stored ground truth.
//!
//! Exit codes: 0 success, 1 I/O or format trouble, 2 bad configuration,
//! 3 diverged training (non-finite loss), 4 shape mismatch between inputs.

use crate::config::RunConfig;
use crate::generator::{generate_batch, Preset};
use crate::metrics;
use crate::phantom::acquire;
use crate::report::{write_eval_csv, write_latent_csv, write_magnitude_series, LossCsv};
use crate::trainer::{train, TrainEvent};
use crate::{container, Error};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "dynrec",
    about = "self-supervised dynamic image reconstruction from radial k-space",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a moving phantom and write it as a dataset file
    Simulate {
        /// key = value config file; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// output dataset path (default: dataset_path from the config)
        #[arg(long)]
        out: Option<PathBuf>,
        /// override the config seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the generator and per-frame latents on a dataset
    Reconstruct {
        #[arg(long)]
        config: Option<PathBuf>,
        /// input dataset (default: dataset_path from the config)
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// output directory (default: out_dir from the config)
        #[arg(long)]
        out: Option<PathBuf>,
        /// override the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// override the network preset (desk64 or paper340)
        #[arg(long)]
        preset: Option<Preset>,
    },
    /// Score a checkpoint against the dataset's ground truth
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// report path (default: report.csv next to the checkpoint)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> crate::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn cmd_simulate(
    config: &Option<PathBuf>,
    out: &Option<PathBuf>,
    seed: Option<u64>,
) -> crate::Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let phantom = cfg.phantom_config();
    let ds = acquire(&phantom)?;
    let path = out.clone().unwrap_or_else(|| PathBuf::from(&cfg.dataset_path));
    container::write_dataset(&path, &ds)?;
    println!(
        "wrote {}: {} frames of {}x{}, {} coils, {} samples/frame",
        path.display(),
        ds.m(),
        ds.n,
        ds.n,
        phantom.n_coils,
        ds.frames[0].sample_count()
    );
    Ok(())
}

pub fn cmd_reconstruct(
    config: &Option<PathBuf>,
    dataset: &Option<PathBuf>,
    out: &Option<PathBuf>,
    seed: Option<u64>,
    preset: Option<Preset>,
) -> crate::Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(p) = preset {
        cfg.preset = p;
    }
    let ds_path = dataset.clone().unwrap_or_else(|| PathBuf::from(&cfg.dataset_path));
    let ds = container::read_dataset(&ds_path)?;
    let out_dir = out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let train_cfg = cfg.train_config(ds.m());
    let mut loss_csv = LossCsv::create(&out_dir.join("loss.csv"))?;
    let mut hook_err: Option<Error> = None;
    let mut hook = |ev: TrainEvent| {
        if hook_err.is_some() {
            return;
        }
        match ev {
            TrainEvent::Epoch { log, .. } => {
                if let Err(e) = loss_csv.push(log) {
                    hook_err = Some(e);
                }
                if log.epoch % 10 == 0 {
                    println!(
                        "level {} epoch {:4}  data {:.6e}  distance {:.6e}  latent {:.6e}  total {:.6e}",
                        log.level,
                        log.epoch,
                        log.breakdown.data,
                        log.breakdown.distance,
                        log.breakdown.latent,
                        log.breakdown.total
                    );
                }
            }
            TrainEvent::LevelEnd { level, params, z } => {
                let path = out_dir.join(format!("checkpoint_level{level}.gsck"));
                if let Err(e) = container::write_checkpoint(&path, params, z) {
                    hook_err = Some(e);
                }
            }
        }
    };
    let result = train(&train_cfg, &ds, &mut hook);
    drop(hook);
    if let Some(e) = hook_err {
        return Err(e);
    }
    // on divergence the loss log written so far stays on disk
    let (params, z, report) = result?;
    container::write_checkpoint(&out_dir.join("checkpoint.gsck"), &params, &z)?;
    // Mirror the checkpoint's 32-bit storage so both artifacts agree exactly.
    let z_stored = z.mapv(|v| v as f32 as f64);
    write_latent_csv(&out_dir.join("latent.csv"), z_stored.view())?;
    let frames = generate_batch(&params, z.view());
    write_magnitude_series(&out_dir.join("frames"), &frames)?;
    let wall: f64 = report.levels.iter().map(|l| l.wall_secs).sum();
    println!(
        "finished {} epochs across {} levels in {:.1} s ({} rejected steps)",
        report.epochs.len(),
        report.levels.len(),
        wall,
        report.rejected_steps()
    );
    Ok(())
}

pub fn cmd_evaluate(
    dataset: &Path,
    checkpoint: &Path,
    out: &Option<PathBuf>,
) -> crate::Result<()> {
    let ds = container::read_dataset(dataset)?;
    let truth = ds.truth.as_ref().ok_or_else(|| {
        Error::Format(format!(
            "{}: no ground truth stored; evaluation needs a simulated dataset",
            dataset.display()
        ))
    })?;
    let (params, z) = container::read_checkpoint(checkpoint)?;
    if z.nrows() != ds.m() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has {} latents but the dataset has {} frames",
            z.nrows(),
            ds.m()
        )));
    }
    if params.output_size() != ds.n {
        return Err(Error::ShapeMismatch(format!(
            "network renders {0}x{0} but the dataset stores {1}x{1}",
            params.output_size(),
            ds.n
        )));
    }
    let recon = generate_batch(&params, z.view());
    let report = metrics::evaluate(
        &truth.images,
        &recon,
        Some(z.view()),
        Some(truth.phases.view()),
    )?;
    // the gridding baseline comes along for scale
    let gridding: Vec<_> = ds
        .frames
        .iter()
        .map(|f| f.gridding(&ds.coils).clone())
        .collect();
    let extra = [
        ("gridding_ser_db", metrics::ser(&truth.images, &gridding)?),
        ("gridding_psnr_db", metrics::psnr(&truth.images, &gridding)?),
        ("gridding_ssim", metrics::ssim(&truth.images, &gridding)?),
    ];
    let path = out
        .clone()
        .unwrap_or_else(|| checkpoint.with_file_name("report.csv"));
    write_eval_csv(&path, &report, &extra)?;
    println!(
        "SER {:.3} dB (gridding {:.3} dB)  PSNR {:.3} dB  SSIM {:.4}",
        report.ser_db, extra[0].1, report.psnr_db, report.ssim
    );
    if let Some((c, r)) = report.latent_alignment {
        println!("latent alignment: cardiac {c:.3}, respiratory {r:.3}");
    }
    println!("report written to {}", path.display());
    Ok(())
}

pub fn run(cli: Cli) -> crate::Result<()> {
    match &cli.command {
        Command::Simulate { config, out, seed } => cmd_simulate(config, out, *seed),
        Command::Reconstruct {
            config,
            dataset,
            out,
            seed,
            preset,
        } => cmd_reconstruct(config, dataset, out, *seed, *preset),
        Command::Evaluate {
            dataset,
            checkpoint,
            out,
        } => cmd_evaluate(dataset, checkpoint, out),
    }
}

/// Entry point used by the binary: returns the process exit code.
pub fn main_entry() -> i32 {
    crate::keep_large_allocations_cached();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
