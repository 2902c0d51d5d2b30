//! Run configuration: a flat `key = value` text format with `#` comments.
//! Every knob has a default; unknown or duplicate keys are rejected with the
//! offending line number, and a parsed config prints back to a canonical
//! text that parses to the same values.

use crate::generator::Preset;
use crate::phantom::PhantomConfig;
use crate::trainer::{LevelConfig, LossModePolicy, Schedule, TrainConfig};
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // model
    pub preset: Preset,
    pub width: usize,
    pub latent_dim: usize,
    // objective
    pub lambda1: f64,
    pub lambda2: f64,
    // schedule
    pub epochs_level1: usize,
    pub epochs_level2: usize,
    pub epochs_level3: usize,
    pub lr_net_level1: f64,
    pub lr_net_level2: f64,
    pub lr_net_level3: f64,
    pub lr_latent_level1: f64,
    pub lr_latent_level2: f64,
    pub lr_latent_level3: f64,
    pub batch_size: usize,
    pub switch_fraction: f64,
    pub loss_mode_level1: LossModePolicy,
    pub loss_mode_level2: LossModePolicy,
    pub loss_mode_level3: LossModePolicy,
    // phantom
    pub grid: usize,
    pub frames: usize,
    pub coils: usize,
    pub spokes_per_frame: usize,
    pub samples_per_spoke: usize,
    pub snr_db: f64,
    pub cardiac_freq: f64,
    pub cardiac_depth: f64,
    pub resp_freq: f64,
    pub resp_amplitude: f64,
    // seeds and paths
    pub seed: u64,
    pub dataset_path: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::Desk64,
            width: 16,
            latent_dim: 2,
            lambda1: 5e-4,
            lambda2: 2.0,
            epochs_level1: 200,
            epochs_level2: 80,
            epochs_level3: 70,
            lr_net_level1: 1e-3,
            lr_net_level2: 5e-4,
            lr_net_level3: 5e-4,
            lr_latent_level1: 0.0,
            lr_latent_level2: 5e-3,
            lr_latent_level3: 1e-3,
            batch_size: 10,
            switch_fraction: 0.8,
            loss_mode_level1: LossModePolicy::Auto,
            loss_mode_level2: LossModePolicy::Auto,
            loss_mode_level3: LossModePolicy::Exact,
            grid: 64,
            frames: 100,
            coils: 4,
            spokes_per_frame: 8,
            samples_per_spoke: 128,
            snr_db: 30.0,
            cardiac_freq: 0.12,
            cardiac_depth: 0.25,
            resp_freq: 0.017,
            resp_amplitude: 3.0,
            seed: 1,
            dataset_path: "dataset.gstm".into(),
            out_dir: "out".into(),
        }
    }
}

fn bad(line: usize, msg: impl Into<String>) -> crate::Error {
    crate::Error::Config {
        line,
        msg: msg.into(),
    }
}

impl RunConfig {
    /// Parse the text form. Unknown keys, duplicates, and malformed values
    /// are errors that carry the 1-based line number.
    pub fn parse(text: &str) -> crate::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped
                .split_once('=')
                .ok_or_else(|| bad(line, format!("expected `key = value`, got `{stripped}`")))?;
            let key = key.trim();
            let value = value.trim();
            if value.is_empty() {
                return Err(bad(line, format!("key `{key}` has no value")));
            }
            if seen.iter().any(|k| k == key) {
                return Err(bad(line, format!("duplicate key `{key}`")));
            }
            cfg.set(key, value, line)?;
            seen.push(key.to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> crate::Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::Error::io(format!("reading config {}", path.display()), e))?;
        RunConfig::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> crate::Result<()> {
        fn num<T: FromStr>(value: &str, key: &str, line: usize) -> crate::Result<T> {
            value
                .parse::<T>()
                .map_err(|_| bad(line, format!("key `{key}`: cannot parse `{value}`")))
        }
        match key {
            "preset" => {
                self.preset = value
                    .parse::<Preset>()
                    .map_err(|_| bad(line, format!("unknown preset `{value}`")))?
            }
            "width" => self.width = num(value, key, line)?,
            "latent_dim" => self.latent_dim = num(value, key, line)?,
            "lambda1" => self.lambda1 = num(value, key, line)?,
            "lambda2" => self.lambda2 = num(value, key, line)?,
            "epochs_level1" => self.epochs_level1 = num(value, key, line)?,
            "epochs_level2" => self.epochs_level2 = num(value, key, line)?,
            "epochs_level3" => self.epochs_level3 = num(value, key, line)?,
            "lr_net_level1" => self.lr_net_level1 = num(value, key, line)?,
            "lr_net_level2" => self.lr_net_level2 = num(value, key, line)?,
            "lr_net_level3" => self.lr_net_level3 = num(value, key, line)?,
            "lr_latent_level1" => self.lr_latent_level1 = num(value, key, line)?,
            "lr_latent_level2" => self.lr_latent_level2 = num(value, key, line)?,
            "lr_latent_level3" => self.lr_latent_level3 = num(value, key, line)?,
            "batch_size" => self.batch_size = num(value, key, line)?,
            "switch_fraction" => self.switch_fraction = num(value, key, line)?,
            "loss_mode_level1" => self.loss_mode_level1 = num(value, key, line)?,
            "loss_mode_level2" => self.loss_mode_level2 = num(value, key, line)?,
            "loss_mode_level3" => self.loss_mode_level3 = num(value, key, line)?,
            "grid" => self.grid = num(value, key, line)?,
            "frames" => self.frames = num(value, key, line)?,
            "coils" => self.coils = num(value, key, line)?,
            "spokes_per_frame" => self.spokes_per_frame = num(value, key, line)?,
            "samples_per_spoke" => self.samples_per_spoke = num(value, key, line)?,
            "snr_db" => self.snr_db = num(value, key, line)?,
            "cardiac_freq" => self.cardiac_freq = num(value, key, line)?,
            "cardiac_depth" => self.cardiac_depth = num(value, key, line)?,
            "resp_freq" => self.resp_freq = num(value, key, line)?,
            "resp_amplitude" => self.resp_amplitude = num(value, key, line)?,
            "seed" => self.seed = num(value, key, line)?,
            "dataset_path" => self.dataset_path = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),
            _ => return Err(bad(line, format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical text form: every key, fixed order, shortest exact numbers.
    pub fn canonical(&self) -> String {
        let p = match self.preset {
            Preset::Desk64 => "desk64",
            Preset::Paper340 => "paper340",
        };
        format!(
            "# model\n\
             preset = {p}\n\
             width = {}\n\
             latent_dim = {}\n\
             # objective\n\
             lambda1 = {}\n\
             lambda2 = {}\n\
             # schedule\n\
             epochs_level1 = {}\n\
             epochs_level2 = {}\n\
             epochs_level3 = {}\n\
             lr_net_level1 = {}\n\
             lr_net_level2 = {}\n\
             lr_net_level3 = {}\n\
             lr_latent_level1 = {}\n\
             lr_latent_level2 = {}\n\
             lr_latent_level3 = {}\n\
             batch_size = {}\n\
             switch_fraction = {}\n\
             loss_mode_level1 = {}\n\
             loss_mode_level2 = {}\n\
             loss_mode_level3 = {}\n\
             # data synthesis\n\
             grid = {}\n\
             frames = {}\n\
             coils = {}\n\
             spokes_per_frame = {}\n\
             samples_per_spoke = {}\n\
             snr_db = {}\n\
             cardiac_freq = {}\n\
             cardiac_depth = {}\n\
             resp_freq = {}\n\
             resp_amplitude = {}\n\
             # seeds and paths\n\
             seed = {}\n\
             dataset_path = {}\n\
             out_dir = {}\n",
            self.width,
            self.latent_dim,
            self.lambda1,
            self.lambda2,
            self.epochs_level1,
            self.epochs_level2,
            self.epochs_level3,
            self.lr_net_level1,
            self.lr_net_level2,
            self.lr_net_level3,
            self.lr_latent_level1,
            self.lr_latent_level2,
            self.lr_latent_level3,
            self.batch_size,
            self.switch_fraction,
            self.loss_mode_level1.label(),
            self.loss_mode_level2.label(),
            self.loss_mode_level3.label(),
            self.grid,
            self.frames,
            self.coils,
            self.spokes_per_frame,
            self.samples_per_spoke,
            self.snr_db,
            self.cardiac_freq,
            self.cardiac_depth,
            self.resp_freq,
            self.resp_amplitude,
            self.seed,
            self.dataset_path,
            self.out_dir,
        )
    }

    pub fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig {
            n: self.grid,
            m: self.frames,
            n_coils: self.coils,
            spokes_per_frame: self.spokes_per_frame,
            samples_per_spoke: self.samples_per_spoke,
            snr_db: self.snr_db,
            cardiac_freq: self.cardiac_freq,
            cardiac_depth: self.cardiac_depth,
            resp_freq: self.resp_freq,
            resp_amplitude: self.resp_amplitude,
            seed: self.seed,
            ..PhantomConfig::default()
        }
    }

    /// Training setup for a dataset with `m` frames. The middle level splits
    /// the data into ceil(m/10) groups.
    pub fn train_config(&self, m: usize) -> TrainConfig {
        let mk = |groups: usize,
                  epochs: usize,
                  lr_net: f64,
                  lr_latent: f64,
                  policy: LossModePolicy| LevelConfig {
            groups,
            epochs,
            lr_net,
            lr_latent,
            policy,
        };
        TrainConfig {
            preset: self.preset,
            width: self.width,
            latent_dim: self.latent_dim,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            schedule: Schedule {
                levels: vec![
                    mk(
                        1,
                        self.epochs_level1,
                        self.lr_net_level1,
                        self.lr_latent_level1,
                        self.loss_mode_level1,
                    ),
                    mk(
                        m.div_ceil(10).min(m),
                        self.epochs_level2,
                        self.lr_net_level2,
                        self.lr_latent_level2,
                        self.loss_mode_level2,
                    ),
                    mk(
                        m,
                        self.epochs_level3,
                        self.lr_net_level3,
                        self.lr_latent_level3,
                        self.loss_mode_level3,
                    ),
                ],
                batch_size: self.batch_size,
                switch_fraction: self.switch_fraction,
            },
            seed: self.seed,
        }
    }
}

/// Every accepted key, in canonical order.
pub const KEYS: [&str; 32] = [
    "preset",
    "width",
    "latent_dim",
    "lambda1",
    "lambda2",
    "epochs_level1",
    "epochs_level2",
    "epochs_level3",
    "lr_net_level1",
    "lr_net_level2",
    "lr_net_level3",
    "lr_latent_level1",
    "lr_latent_level2",
    "lr_latent_level3",
    "batch_size",
    "switch_fraction",
    "loss_mode_level1",
    "loss_mode_level2",
    "loss_mode_level3",
    "grid",
    "frames",
    "coils",
    "spokes_per_frame",
    "samples_per_spoke",
    "snr_db",
    "cardiac_freq",
    "cardiac_depth",
    "resp_freq",
    "resp_amplitude",
    "seed",
    "dataset_path",
    "out_dir",
];
