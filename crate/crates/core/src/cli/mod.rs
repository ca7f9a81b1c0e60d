//! Command-line front end.
//!
//! Every command is first resolved into a [`Job`]: a self-contained, serializable
//! description (problem embedded, seed fixed, weights loaded). Executing a job is
//! deterministic, and the job is stored in `manifest.json` next to the outputs so
//! `replay` can regenerate them byte for byte.

mod args;
mod jobs;
mod presets;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use args::Cli;
pub use jobs::{execute, Job};
pub use presets::Preset;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_REGIME: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Lib(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Lib(e) if e.is_regime() => EXIT_REGIME,
            CliError::Lib(Error::StepFailed { .. }) => EXIT_INTERNAL,
            CliError::Lib(_) | CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } | CliError::Internal(_) => EXIT_INTERNAL,
        }
    }

    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Written next to every set of outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub job: Job,
    /// File names relative to the manifest's directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(job: Job, outputs: Vec<String>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: job.name().into(),
            seed: job.seed(),
            job,
            outputs,
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: not a run manifest: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Internal(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match args::dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
