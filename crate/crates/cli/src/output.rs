// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use circuit_lens_core::io::to_json_string;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const RUN_FILE: &str = "run.json";

/// What a command did, enough to re-run it and check its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    pub flags: serde_json::Value,
    pub seed: Option<u64>,
    /// File name (relative to the output directory) to SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Files written into one output directory.
pub struct Artifacts {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), files: BTreeMap::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes.as_ref()).map_err(|e| CliError::io(&path, e))?;
        self.files.insert(name.to_string(), hex::encode(Sha256::digest(bytes.as_ref())));
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = to_json_string(value)?;
        self.write(name, text)
    }

    /// Records a file that something else already wrote into the directory.
    pub fn record(&mut self, name: &str) -> Result<(), CliError> {
        let hash = sha256_file(&self.dir.join(name))?;
        self.files.insert(name.to_string(), hash);
        Ok(())
    }

    pub fn finish(self, command: &str, argv: &[String], flags: serde_json::Value, seed: Option<u64>) -> Result<RunRecord, CliError> {
        let record = RunRecord {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv: argv.to_vec(),
            flags,
            seed,
            artifacts: self.files,
        };
        let path = self.dir.join(RUN_FILE);
        fs::write(&path, to_json_string(&record)?).map_err(|e| CliError::io(&path, e))?;
        Ok(record)
    }
}
