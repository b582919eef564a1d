// SPDX-License-Identifier: MIT OR Apache-2.0

//! `circuit-lens`: dataset generation, planted models, patching,
//! attribution, direction analysis, and steering from the command line.
//!
//! Every command writes JSON artifacts plus a `run.json` into its `--out`
//! directory. Failures print `{"error": {"kind", "message"}}` to stderr and
//! exit non-zero: 2 for usage errors, 3 for a failed oracle check, 1 otherwise.

mod args;
mod commands;
mod output;

use std::fmt;
use std::path::Path;
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use crate::args::Cli;

pub const THREADS_ENV: &str = "CIRCUIT_LENS_THREADS";

#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    pub code: u8,
}

impl CliError {
    pub fn new(kind: &str, message: impl Into<String>) -> Self {
        Self { kind: kind.into(), message: message.into(), code: 1 }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new("io", format!("{}: {e}", path.display()))
    }

    fn to_json(&self) -> String {
        json!({"error": {"kind": self.kind, "message": self.message}}).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl From<circuit_lens_core::Error> for CliError {
    fn from(e: circuit_lens_core::Error) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::new("invalid_argument", format!("{THREADS_ENV} must be a non-negative integer, got `{raw}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::new("invalid_argument", e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand)
            {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let err = CliError { kind: "usage".into(), message: e.kind().to_string() + ": " + e.to_string().trim(), code: 2 };
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.code);
        }
    };
    let result = configure_threads().and_then(|()| commands::run(cli.command, &argv[1..]));
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.code)
        }
    }
}
