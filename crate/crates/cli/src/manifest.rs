use std::fs;
use std::path::{Path, PathBuf};

use qbtc_core::ProtocolConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub file: String,
    pub sha256: String,
}

/// Everything needed to re-run a command. Paths of outputs are relative to
/// the output directory and no wall-clock time is recorded, so a replay
/// writes an identical manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    /// Arguments after the program name, minus `--out-dir` and `--config`.
    pub args: Vec<String>,
    pub config: ProtocolConfig,
    pub seed: u64,
    pub config_hash: String,
    pub start_tick: u64,
    pub end_tick: u64,
    pub outputs: Vec<OutputRecord>,
    pub chain_hash: Option<String>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain struct");
        s.push('\n');
        s
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects a command's output files and writes them under `dir`.
pub struct Outputs {
    dir: PathBuf,
    records: Vec<OutputRecord>,
    pub chain_hash: Option<String>,
    pub end_tick: u64,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            records: Vec::new(),
            chain_hash: None,
            end_tick: 0,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn write(&mut self, file: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(file);
        fs::write(&path, bytes).map_err(CliError::io(&path))?;
        self.records.push(OutputRecord {
            file: file.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn finish(
        mut self,
        command: &str,
        args: Vec<String>,
        config: &ProtocolConfig,
    ) -> Result<RunManifest, CliError> {
        self.records.sort_by(|a, b| a.file.cmp(&b.file));
        let manifest = RunManifest {
            tool: format!("qbtc {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            args,
            config: config.clone(),
            seed: config.seed,
            config_hash: qbtc_core::simnet::config_hash(config),
            start_tick: 0,
            end_tick: self.end_tick,
            outputs: self.records,
            chain_hash: self.chain_hash,
        };
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, manifest.to_json()).map_err(CliError::io(&path))?;
        Ok(manifest)
    }
}

/// Drops `--out-dir` and `--config` (and their values) from raw arguments.
pub fn replayable_args(raw: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for arg in raw {
        if skip {
            skip = false;
            continue;
        }
        if arg == "--out-dir" || arg == "--config" {
            skip = true;
            continue;
        }
        if arg.starts_with("--out-dir=") || arg.starts_with("--config=") {
            continue;
        }
        out.push(arg.clone());
    }
    out
}

/// Lists the differences between an original manifest and its replay.
pub fn compare(original: &RunManifest, replayed: &RunManifest) -> Vec<String> {
    let mut diffs = Vec::new();
    for rec in &original.outputs {
        match replayed.outputs.iter().find(|r| r.file == rec.file) {
            Some(r) if r.sha256 == rec.sha256 => {}
            Some(_) => diffs.push(format!("{} has different contents", rec.file)),
            None => diffs.push(format!("{} was not produced", rec.file)),
        }
    }
    for rec in &replayed.outputs {
        if !original.outputs.iter().any(|r| r.file == rec.file) {
            diffs.push(format!("{} is new", rec.file));
        }
    }
    if diffs.is_empty() && original.to_json() != replayed.to_json() {
        diffs.push("manifest differs".into());
    }
    diffs
}
