use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use crate::error::Result;
use crate::io::write_json;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance record written next to every output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub version: &'static str,
    pub threads: usize,
    pub wall_time_secs: f64,
    pub outputs: Vec<PathBuf>,
}

pub struct ManifestBuilder {
    command: String,
    config: Value,
    seed: u64,
    start: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: Value, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            start: Instant::now(),
        }
    }

    pub fn finish(self, outputs: Vec<PathBuf>) -> RunManifest {
        RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            version: VERSION,
            threads: rayon::current_num_threads(),
            wall_time_secs: self.start.elapsed().as_secs_f64(),
            outputs,
        }
    }
}

/// `out.csv` -> `out.csv.manifest.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

pub fn write_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    write_json(path, m)
}
