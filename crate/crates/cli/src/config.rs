//! JSON job configurations. Unknown keys are rejected so typos in loss
//! weights or paths fail loudly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ev4d_core::field::{Architecture, CylinderBounds};
use ev4d_core::multiseg::SegmentSpan;
use ev4d_core::sim::{CameraModel, SimConfig, ToyScene};
use ev4d_core::training::TrainConfig;

use crate::{CliError, CliResult};

/// Reads and parses a JSON config, mapping failures to config errors with
/// the offending path in the message.
pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("cannot parse {}: {e}", path.display())))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::runtime(format!("serialization failed: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// `simulate` job: scene, cameras, simulator settings and the reference
/// frame timestamps.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateJob {
    pub scene: ToyScene,
    pub cameras: Vec<CameraModel>,
    pub sim: SimConfig,
    pub ref_times_us: Vec<u64>,
}

/// Per-view file layout emitted by `simulate` and consumed by `train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneManifest {
    pub width: u16,
    pub height: u16,
    pub n_views: usize,
    pub t_end_us: u64,
    pub c_pos: f64,
    pub c_neg: f64,
    pub ref_times_us: Vec<u64>,
}

pub fn events_file(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("events_{view:02}.evt1"))
}

pub fn background_file(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("background_{view:02}.pfm"))
}

pub fn camera_file(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("camera_{view:02}.json"))
}

pub fn ref_frame_file(dir: &Path, view: usize, t_us: u64) -> PathBuf {
    dir.join(format!("ref_{view:02}_{t_us:010}.pfm"))
}

/// `train` job: where the simulated data lives and how to fit one segment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    pub data_dir: PathBuf,
    /// indices of the training views inside the data directory
    pub views: Vec<usize>,
    pub segment: SegmentSpan,
    pub bounds: CylinderBounds,
    #[serde(default)]
    pub arch: Architecture,
    #[serde(default)]
    pub train: TrainConfig,
    /// write a PPM preview of view 0 every this many logged iterations
    /// (0 = never)
    #[serde(default)]
    pub preview_every: u64,
}
