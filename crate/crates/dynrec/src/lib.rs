//! Self-supervised dynamic image reconstruction from undersampled radial
//! k-space. A small convolutional generator maps per-frame latent vectors to
//! complex images; generator weights and latents are fit jointly against the
//! measured data, with smoothness penalties on the latent trajectory and on
//! the generator's sensitivity to its input.

/// Keep big numeric workspaces on the heap across allocation cycles.
///
/// Training allocates and frees GEMM buffers far above glibc's mmap
/// threshold every step, and the resulting mmap/munmap page-fault churn
/// costs about a third of wall time. Raising the threshold (and disabling
/// heap trimming) lets glibc reuse those blocks. Safe to call repeatedly;
/// takes effect once.
pub fn keep_large_allocations_cached() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    });
}

pub mod cli;
pub mod config;
pub mod container;
pub mod diffops;
pub mod generator;
pub mod kspace;
pub mod metrics;
pub mod objective;
pub mod phantom;
pub mod report;
pub mod trainer;

/// Errors surfaced to the command-line layer. Each variant maps to a distinct
/// process exit code so scripted callers can tell failure classes apart.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("training diverged: non-finite loss at level {level}, epoch {epoch}")]
    NonFiniteLoss { level: usize, epoch: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Format(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::NonFiniteLoss { .. } => 3,
            Error::ShapeMismatch(_) => 4,
            Error::Io { .. } | Error::Format(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
