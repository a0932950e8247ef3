//! Run manifests: every subcommand that writes outputs records its config
//! snapshot, resolved seed, version and wall-clock time.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::CliResult;

#[derive(Debug, Serialize)]
pub struct Manifest<C: Serialize> {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: C,
    pub wall_clock_sec: f64,
}

pub struct ManifestTimer {
    start: Instant,
}

impl ManifestTimer {
    pub fn start() -> Self {
        ManifestTimer { start: Instant::now() }
    }

    pub fn write<C: Serialize>(self, dir: &Path, command: &str, seed: u64, config: C) -> CliResult<()> {
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            wall_clock_sec: self.start.elapsed().as_secs_f64(),
        };
        crate::config::save_json(&dir.join("manifest.json"), &manifest)
    }
}

/// Creates the output directory (and parents) if needed.
pub fn ensure_out_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}
