use std::path::PathBuf;

use clap::Args;

use ev4d_core::events::BayerPattern;
use ev4d_core::sim::{render_frame, simulate_view_events, ToyScene};
use ev4d_core::{io, sim};

use crate::config::{self, SceneManifest, SimulateJob};
use crate::manifest::{ensure_out_dir, ManifestTimer};
use crate::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON job description (scene, cameras, simulator settings)
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory
    #[arg(long, short)]
    pub out: PathBuf,
}

fn background_scene(scene: &ToyScene) -> ToyScene {
    ToyScene {
        objects: vec![],
        backgrounds: scene.backgrounds.clone(),
        t_end: scene.t_end,
    }
}

pub fn run(args: SimulateArgs, seed_override: Option<u64>) -> CliResult<()> {
    let timer = ManifestTimer::start();
    let mut job: SimulateJob = config::load_json(&args.config)?;
    if let Some(seed) = seed_override {
        job.sim.seed = seed;
    }
    job.sim.validate().map_err(CliError::from)?;
    if job.cameras.is_empty() {
        return Err(CliError::config("need at least one camera"));
    }
    for (k, cam) in job.cameras.iter().enumerate() {
        cam.validate()
            .map_err(|e| CliError::config(format!("camera {k}: {e}")))?;
    }
    let t_end_us = (job.scene.t_end * 1e6).round() as u64;
    for &t in &job.ref_times_us {
        if t > t_end_us {
            return Err(CliError::config(format!(
                "reference time {t} beyond scene end {t_end_us}"
            )));
        }
    }
    ensure_out_dir(&args.out)?;

    let pattern = BayerPattern::default();
    let bg_scene = background_scene(&job.scene);
    for (k, camera) in job.cameras.iter().enumerate() {
        let stream = simulate_view_events(&job.scene, camera, k, &job.sim, &pattern)?;
        io::write_evt1_file(&config::events_file(&args.out, k), &stream, &job.sim.thresholds())?;

        let background = render_frame(&bg_scene, camera, k, 0.0)?;
        io::write_pfm_file(&config::background_file(&args.out, k), &background)?;

        config::save_json(&config::camera_file(&args.out, k), camera)?;

        for &t in &job.ref_times_us {
            let frame = render_frame(&job.scene, camera, k, t as f64 * 1e-6)?;
            io::write_pfm_file(&config::ref_frame_file(&args.out, k, t), &frame)?;
        }
        log::info!("view {k}: {} events", stream.len());
    }

    let manifest = SceneManifest {
        width: job.cameras[0].width,
        height: job.cameras[0].height,
        n_views: job.cameras.len(),
        t_end_us,
        c_pos: job.sim.c_pos,
        c_neg: job.sim.c_neg,
        ref_times_us: job.ref_times_us.clone(),
    };
    config::save_json(&args.out.join("scene.json"), &manifest)?;

    let seed = job.sim.seed;
    timer.write(&args.out, "simulate", seed, &job)?;
    Ok(())
}

/// Re-renders a ground-truth frame; shared with the eval tooling.
pub fn ground_truth_frame(
    scene: &ToyScene,
    camera: &sim::CameraModel,
    view: usize,
    t_us: u64,
) -> CliResult<ev4d_core::events::IntensityFrame> {
    Ok(render_frame(scene, camera, view, t_us as f64 * 1e-6)?)
}
