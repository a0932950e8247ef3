use std::path::PathBuf;

use clap::Args;

use ev4d_core::field::RenderConfig;
use ev4d_core::io;
use ev4d_core::multiseg::MultiSegmentRenderer;
use ev4d_core::sim::CameraModel;

use crate::config;
use crate::manifest::{ensure_out_dir, ManifestTimer};
use crate::{CliError, CliResult};

#[derive(Debug, Args, serde::Serialize)]
pub struct RenderArgs {
    /// Directory holding trained segment checkpoints (*.bin)
    #[arg(long)]
    pub checkpoints: PathBuf,
    /// Camera JSON for the novel view
    #[arg(long)]
    pub camera: PathBuf,
    /// Ground-truth background PFM of the render view
    #[arg(long)]
    pub background: PathBuf,
    /// First frame timestamp, microseconds
    #[arg(long)]
    pub t_start: u64,
    /// Last frame timestamp, microseconds
    #[arg(long)]
    pub t_end: u64,
    /// Frames per second of the output sequence
    #[arg(long, default_value_t = 20.0)]
    pub fps: f64,
    #[arg(long, default_value_t = 48)]
    pub n_coarse: usize,
    #[arg(long, default_value_t = 16)]
    pub n_fine: usize,
    /// Output directory, frames written as frame_%06d.ppm (+ .pfm)
    #[arg(long, short)]
    pub out: PathBuf,
}

pub fn run(args: RenderArgs, seed_override: Option<u64>) -> CliResult<()> {
    let timer = ManifestTimer::start();
    let seed = seed_override.unwrap_or(0);
    if args.t_end < args.t_start || args.fps <= 0.0 {
        return Err(CliError::config("need t_end >= t_start and fps > 0"));
    }
    let (schedule, models, bounds) = super::train::load_checkpoints(&args.checkpoints)?;
    let camera: CameraModel = config::load_json(&args.camera)?;
    camera.validate()?;
    let background = io::read_pfm_file(&args.background)?;

    let renderer = MultiSegmentRenderer::new(
        &schedule,
        &models,
        bounds,
        RenderConfig {
            n_coarse: args.n_coarse,
            n_fine: args.n_fine,
            stratified: false,
            alpha: f64::INFINITY,
        },
    )?;

    ensure_out_dir(&args.out)?;
    let step_us = (1e6 / args.fps).round() as u64;
    let mut t = args.t_start;
    let mut i = 0usize;
    while t <= args.t_end {
        let frame = renderer.render_view(&camera, &background, t, seed ^ (i as u64) << 20)?;
        io::write_ppm_file(&args.out.join(format!("frame_{i:06}.ppm")), &frame)?;
        io::write_pfm_file(&args.out.join(format!("frame_{i:06}.pfm")), &frame)?;
        log::info!("frame {i} at t = {t} us");
        i += 1;
        t = args.t_start + i as u64 * step_us;
    }
    timer.write(&args.out, "render", seed, &args)?;
    Ok(())
}
