use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;

use ev4d_core::accum::DecayAccumulator;
use ev4d_core::io;
use ev4d_core::multiseg::{MultiSegmentRenderer, SegmentSchedule};
use ev4d_core::sim::CameraModel;
use ev4d_core::training::{train_segment_with_progress, IterationLog, SegmentData, ViewData};

use crate::config::{self, SceneManifest, TrainJob};
use crate::manifest::{ensure_out_dir, ManifestTimer};
use crate::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON job description (data directory, segment, losses)
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for the checkpoint and logs
    #[arg(long, short)]
    pub out: PathBuf,
}

/// Loads one view's training inputs from a simulate output directory.
pub fn load_view(dir: &Path, view: usize, span_endpoints: [u64; 2], decay: f64) -> CliResult<ViewData> {
    let (stream, thresholds) = io::read_evt1_file(&config::events_file(dir, view))?;
    let index = DecayAccumulator::build(&stream, &thresholds, decay)?;
    let background = io::read_pfm_file(&config::background_file(dir, view))?;
    let camera: CameraModel = config::load_json(&config::camera_file(dir, view))?;
    let mut ref_frames = Vec::new();
    for t in span_endpoints {
        let path = config::ref_frame_file(dir, view, t);
        let frame = io::read_pfm_file(&path)
            .map_err(|e| CliError::config(format!("missing reference frame {}: {e}", path.display())))?;
        ref_frames.push((t, frame));
    }
    Ok(ViewData {
        index,
        background,
        camera,
        ref_frames,
    })
}

pub fn write_loss_csv(path: &Path, log: &[IterationLog]) -> CliResult<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iter,loss_event,loss_acc,loss_rgb,loss_sparsity,total,window_t0,window_t1")?;
    for e in log {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            e.iter,
            e.components.event,
            e.components.acc,
            e.components.rgb,
            e.components.sparsity,
            e.total,
            e.window.0,
            e.window.1
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn run(args: TrainArgs, seed_override: Option<u64>) -> CliResult<()> {
    let timer = ManifestTimer::start();
    let mut job: TrainJob = config::load_json(&args.config)?;
    if let Some(seed) = seed_override {
        job.train.seed = seed;
    }
    job.train.validate()?;

    let scene: SceneManifest = config::load_json(&job.data_dir.join("scene.json"))?;
    if job.views.len() < 2 {
        return Err(CliError::config("need at least 2 training views"));
    }
    for &v in &job.views {
        if v >= scene.n_views {
            return Err(CliError::config(format!(
                "view {v} out of range (scene has {} views)",
                scene.n_views
            )));
        }
    }

    let endpoints = [job.segment.t_start, job.segment.t_end];
    let mut views = Vec::new();
    for &v in &job.views {
        views.push(load_view(&job.data_dir, v, endpoints, job.train.decay)?);
    }
    let segment = SegmentData {
        views,
        span: job.segment,
    };

    ensure_out_dir(&args.out)?;
    let preview_every = job.preview_every;
    let preview_ctx = (segment.views[0].camera.clone(), segment.views[0].background.clone());
    let bounds = job.bounds;
    let out_dir = args.out.clone();
    let mut preview_counter = 0u64;
    let (params, log) = train_segment_with_progress(
        &segment,
        job.arch,
        &job.bounds,
        &job.train,
        |iter, params, entry| {
            log::info!(
                "iter {iter}: total {:.5} (event {:.5}, acc {:.5}, rgb {:.5}, sparsity {:.5})",
                entry.total,
                entry.components.event,
                entry.components.acc,
                entry.components.rgb,
                entry.components.sparsity
            );
            if preview_every > 0 {
                preview_counter += 1;
                if preview_counter % preview_every == 0 {
                    let schedule = SegmentSchedule {
                        segments: vec![job.segment],
                        t_end: job.segment.t_end,
                        nominal_len: job.segment.t_end - job.segment.t_start,
                    };
                    let models = vec![params.clone()];
                    let renderer = MultiSegmentRenderer::new(
                        &schedule,
                        &models,
                        bounds,
                        ev4d_core::field::RenderConfig {
                            n_coarse: 32,
                            n_fine: 0,
                            stratified: false,
                            alpha: f64::INFINITY,
                        },
                    )?;
                    let mid = (job.segment.t_start + job.segment.t_end) / 2;
                    let frame = renderer.render_view(&preview_ctx.0, &preview_ctx.1, mid, 7)?;
                    io::write_ppm_file(&out_dir.join(format!("preview_{iter:07}.ppm")), &frame)?;
                }
            }
            Ok(())
        },
    )?;

    io::write_checkpoint_file(
        &args.out.join("checkpoint.bin"),
        &io::Checkpoint {
            params,
            span: job.segment,
            bounds: job.bounds,
        },
    )?;
    write_loss_csv(&args.out.join("loss_log.csv"), &log)?;
    let seed = job.train.seed;
    timer.write(&args.out, "train", seed, &job)?;
    Ok(())
}

/// Builds the schedule implied by a list of trained segment spans; used by
/// `render` to validate checkpoint directories.
pub fn schedule_from_spans(spans: &[ev4d_core::multiseg::SegmentSpan]) -> CliResult<SegmentSchedule> {
    if spans.is_empty() {
        return Err(CliError::config("no checkpoints found"));
    }
    let mut sorted = spans.to_vec();
    sorted.sort_by_key(|s| s.t_start);
    let t_end = sorted.iter().map(|s| s.t_end).max().unwrap();
    if sorted.len() == 1 {
        return Ok(SegmentSchedule {
            segments: sorted,
            t_end,
            nominal_len: t_end,
        });
    }
    // recover the nominal length from the overlap structure: consecutive
    // segments share 10% of a nominal length
    let schedule = SegmentSchedule {
        nominal_len: 0,
        segments: sorted,
        t_end,
    };
    Ok(schedule)
}

/// Convenience used by `render`: schedule + models from a checkpoint dir.
pub fn load_checkpoints(dir: &Path) -> CliResult<(SegmentSchedule, Vec<ev4d_core::field::FieldParams>, ev4d_core::field::CylinderBounds)> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::config(format!("cannot read checkpoint dir {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(CliError::config(format!("no .bin checkpoints in {}", dir.display())));
    }
    let mut checkpoints = Vec::new();
    for p in &entries {
        checkpoints.push(io::read_checkpoint_file(p)?);
    }
    checkpoints.sort_by_key(|c| c.span.t_start);
    let bounds = checkpoints[0].bounds;
    let spans: Vec<_> = checkpoints.iter().map(|c| c.span).collect();
    let schedule = schedule_from_spans(&spans)?;
    let models = checkpoints.into_iter().map(|c| c.params).collect();
    Ok((schedule, models, bounds))
}
