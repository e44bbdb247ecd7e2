//! Command implementations behind the `mtat` binary. Each command reads a
//! [`RunConfig`], writes its outputs plus `config.resolved.json` into
//! `config.out`, and returns an in-memory summary.

mod bench;
mod commands;
pub mod config;
mod flops;

pub use bench::{cmd_bench, fit_exponent, BenchFit, BenchReport, BenchRow};
pub use commands::{
    cmd_redundancy, cmd_sample, cmd_sweep, cmd_train, load_model, RedundancySummary, SampleSummary, SweepSummary,
    TrainSummary,
};
pub use config::RunConfig;
pub use flops::{cmd_flops, FlopsRow, FlopsTable, REFERENCE_GFLOPS};

use std::fmt::Display;
use std::fs;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    /// 2 for configuration and usage problems, 3 for numeric failures,
    /// 1 when an output could not be written.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 1,
        }
    }

    pub(crate) fn prefixed(self, ctx: impl Display) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{ctx}: {m}")),
            CliError::Numeric(m) => CliError::Numeric(format!("{ctx}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{ctx}: {m}")),
        }
    }
}

impl From<mtat_core::Error> for CliError {
    fn from(e: mtat_core::Error) -> Self {
        match e {
            mtat_core::Error::Numeric(_) | mtat_core::Error::DegenerateTrajectory => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub(crate) fn write_resolved(cfg: &RunConfig) -> CliResult<()> {
    write_atomic(&cfg.out.join("config.resolved.json"), cfg.to_json().as_bytes())
}
