//! End-to-end toy pipeline: simulate a bundled dynamic scene, train
//! segment models (full loss and ablations), render a hold-out view across
//! the cross-faded segments and report PSNR/SSIM.

use std::path::Path;

use serde::{Deserialize, Serialize};

use ev4d_core::accum::DecayAccumulator;
use ev4d_core::analysis::{psnr, ssim};
use ev4d_core::events::BayerPattern;
use ev4d_core::field::{Architecture, CylinderBounds, EncodingConfig, RenderConfig, Vec3};
use ev4d_core::io;
use ev4d_core::multiseg::{make_schedule, MultiSegmentRenderer};
use ev4d_core::sim::{render_frame, simulate_view_events, CameraModel, SceneObject, SimConfig, ToyScene, Trajectory};
use ev4d_core::training::{train_segment, SegmentData, TrainConfig, ViewData};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct E2eConfig {
    pub resolution: u16,
    /// number of training views on the ring (the hold-out is extra)
    pub n_views: usize,
    pub t_end_sec: f64,
    pub segments: usize,
    pub fps: f64,
    pub threshold: f64,
    pub bounds: CylinderBounds,
    pub arch: Architecture,
    pub train: TrainConfig,
    /// hold-out render timestamps, evenly spaced over the recording
    pub eval_times: usize,
    pub eval_n_coarse: usize,
    pub eval_n_fine: usize,
    /// also train the lambda_1 = 0 and lambda_2 = lambda_3 = 0 variants
    pub run_ablations: bool,
    /// use the static variant of the bundled scene
    pub static_scene: bool,
    pub seed: u64,
}

impl Default for E2eConfig {
    fn default() -> Self {
        E2eConfig {
            resolution: 64,
            n_views: 4,
            t_end_sec: 1.0,
            segments: 2,
            fps: 1000.0,
            threshold: 0.12,
            bounds: CylinderBounds {
                radius: 0.78,
                y_min: -0.62,
                y_max: 0.78,
            },
            arch: Architecture {
                encoding: EncodingConfig {
                    n_spatial_freqs: 10,
                    n_temporal_freqs: 6,
                    n_dir_freqs: 2,
                    include_identity: true,
                    anneal_alpha: f64::INFINITY,
                },
                hidden_layers: 3,
                hidden_dim: 48,
                color_hidden_dim: 24,
            },
            train: TrainConfig {
                batch_size: 144,
                iterations: 800,
                n_coarse: 24,
                n_fine: 8,
                lr: 5e-4,
                enc_anneal_iters: 300,
                sparsity_anneal_iters: 400.0,
                decay: 1.0,
                log_every: 100,
                ..TrainConfig::default()
            },
            eval_times: 20,
            eval_n_coarse: 32,
            eval_n_fine: 8,
            run_ablations: true,
            static_scene: false,
            seed: 7,
        }
    }
}

/// The bundled dynamic scene: a sphere orbiting above a static box.
pub fn bundled_dynamic_scene(t_end: f64) -> ToyScene {
    ToyScene {
        objects: vec![
            SceneObject::Sphere {
                trajectory: Trajectory::Orbit {
                    center: [0.0, 0.12, 0.0],
                    radius: 0.42,
                    omega: std::f64::consts::PI / t_end,
                    phase: 0.6,
                },
                radius: 0.26,
                color: [0.85, 0.25, 0.18],
            },
            SceneObject::Box {
                trajectory: Trajectory::Static {
                    position: [0.0, -0.34, 0.0],
                },
                half_extents: [0.30, 0.12, 0.30],
                color: [0.20, 0.45, 0.78],
            },
        ],
        backgrounds: vec![[0.5, 0.5, 0.5]],
        t_end,
    }
}

/// Static variant: same geometry, no motion.
pub fn bundled_static_scene(t_end: f64) -> ToyScene {
    let mut scene = bundled_dynamic_scene(t_end);
    for obj in &mut scene.objects {
        let fixed = match obj {
            SceneObject::Sphere { trajectory, .. } | SceneObject::Box { trajectory, .. } => {
                let p = trajectory.position(0.0);
                Trajectory::Static {
                    position: [p.x, p.y, p.z],
                }
            }
        };
        match obj {
            SceneObject::Sphere { trajectory, .. } | SceneObject::Box { trajectory, .. } => {
                *trajectory = fixed;
            }
        }
    }
    scene
}

/// `n` cameras on a ring around the origin plus one hold-out between the
/// first two.
pub fn camera_ring(n: usize, resolution: u16) -> (Vec<CameraModel>, CameraModel) {
    let focal = 1.1 * f64::from(resolution);
    let radius = 2.2;
    let mk = |angle: f64, height: f64| {
        CameraModel::look_at(
            Vec3::new(radius * angle.cos(), height, radius * angle.sin()),
            Vec3::new(0.0, 0.0, 0.0),
            focal,
            focal,
            resolution,
            resolution,
        )
    };
    let train: Vec<CameraModel> = (0..n)
        .map(|k| {
            let angle = k as f64 / n as f64 * std::f64::consts::TAU;
            mk(angle, if k % 2 == 0 { 0.35 } else { 0.58 })
        })
        .collect();
    let holdout = mk(std::f64::consts::PI / n as f64, 0.47);
    (train, holdout)
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantMetrics {
    pub name: String,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub per_time: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct E2eMetrics {
    pub variants: Vec<VariantMetrics>,
}

impl E2eMetrics {
    pub fn variant(&self, name: &str) -> Option<&VariantMetrics> {
        self.variants.iter().find(|v| v.name == name)
    }
}

struct PreparedData {
    scene: ToyScene,
    cameras: Vec<CameraModel>,
    holdout: CameraModel,
    streams: Vec<ev4d_core::events::EventStream>,
    t_end_us: u64,
}

fn prepare(cfg: &E2eConfig) -> CliResult<PreparedData> {
    let scene = if cfg.static_scene {
        bundled_static_scene(cfg.t_end_sec)
    } else {
        bundled_dynamic_scene(cfg.t_end_sec)
    };
    let (cameras, holdout) = camera_ring(cfg.n_views, cfg.resolution);
    let sim = SimConfig {
        fps: cfg.fps,
        c_pos: cfg.threshold,
        c_neg: cfg.threshold,
        noise_rate: 0.0,
        noise_p_pos: 0.5,
        seed: cfg.seed,
    };
    let pattern = BayerPattern::default();
    let mut streams = Vec::with_capacity(cfg.n_views);
    for (k, cam) in cameras.iter().enumerate() {
        let stream = simulate_view_events(&scene, cam, k, &sim, &pattern)?;
        log::info!("e2e view {k}: {} events", stream.len());
        streams.push(stream);
    }
    Ok(PreparedData {
        scene,
        cameras,
        holdout,
        streams,
        t_end_us: (cfg.t_end_sec * 1e6).round() as u64,
    })
}

fn train_variant(
    data: &PreparedData,
    cfg: &E2eConfig,
    train_cfg: &TrainConfig,
    name: &str,
    out_dir: Option<&Path>,
) -> CliResult<(ev4d_core::multiseg::SegmentSchedule, Vec<ev4d_core::field::FieldParams>)> {
    let schedule = make_schedule(data.t_end_us, data.t_end_us / cfg.segments as u64)?;
    let thresholds = ev4d_core::events::Thresholds::symmetric(cfg.threshold)?;
    let mut models = Vec::with_capacity(schedule.segments.len());
    for (si, span) in schedule.segments.iter().enumerate() {
        let mut views = Vec::with_capacity(cfg.n_views);
        for (k, (cam, stream)) in data.cameras.iter().zip(&data.streams).enumerate() {
            let index = DecayAccumulator::build(stream, &thresholds, train_cfg.decay)?;
            let background = data.scene.background_frame(k, cam.width, cam.height);
            let mut ref_frames = Vec::new();
            for t in [span.t_start, span.t_end] {
                ref_frames.push((t, render_frame(&data.scene, cam, k, t as f64 * 1e-6)?));
            }
            views.push(ViewData {
                index,
                background,
                camera: cam.clone(),
                ref_frames,
            });
        }
        let segment = SegmentData { views, span: *span };
        let t = std::time::Instant::now();
        let (params, log) = train_segment(&segment, cfg.arch, &cfg.bounds, train_cfg)?;
        let last = log.last().map(|l| l.total).unwrap_or(f64::NAN);
        log::info!(
            "segment {si}: trained {} iters in {:.1?} (final loss {last:.5})",
            train_cfg.iterations,
            t.elapsed()
        );
        if let Some(dir) = out_dir {
            crate::commands::train::write_loss_csv(&dir.join(format!("{name}_seg{si}_loss.csv")), &log)?;
        }
        models.push(params);
    }
    Ok((schedule, models))
}

fn eval_holdout(
    data: &PreparedData,
    cfg: &E2eConfig,
    schedule: &ev4d_core::multiseg::SegmentSchedule,
    models: &[ev4d_core::field::FieldParams],
    name: &str,
    out_dir: Option<&Path>,
) -> CliResult<VariantMetrics> {
    let renderer = MultiSegmentRenderer::new(
        schedule,
        models,
        cfg.bounds,
        RenderConfig {
            n_coarse: cfg.eval_n_coarse,
            n_fine: cfg.eval_n_fine,
            stratified: true,
            alpha: f64::INFINITY,
        },
    )?;
    let holdout_view = cfg.n_views; // background index for the extra camera
    let background = data
        .scene
        .background_frame(holdout_view, cfg.resolution, cfg.resolution);

    let mut per_time = Vec::with_capacity(cfg.eval_times);
    let mut sum_psnr = 0.0;
    let mut sum_ssim = 0.0;
    for i in 0..cfg.eval_times {
        let t = data.t_end_us * i as u64 / (cfg.eval_times.max(2) - 1) as u64;
        let pred = renderer.render_view(&data.holdout, &background, t, cfg.seed ^ 0xE7A1)?;
        let gt = render_frame(&data.scene, &data.holdout, holdout_view, t as f64 * 1e-6)?;
        let p = psnr(&pred, &gt, 1.0)?;
        sum_psnr += p;
        sum_ssim += ssim(&pred, &gt, 1.0)?;
        per_time.push((t, p));
        if let Some(dir) = out_dir {
            io::write_ppm_file(&dir.join(format!("{name}_pred_{i:03}.ppm")), &pred)?;
            if i == 0 {
                io::write_ppm_file(&dir.join(format!("gt_{i:03}.ppm")), &gt)?;
            }
        }
    }
    Ok(VariantMetrics {
        name: name.to_string(),
        mean_psnr: sum_psnr / cfg.eval_times as f64,
        mean_ssim: sum_ssim / cfg.eval_times as f64,
        per_time,
    })
}

/// Runs the full pipeline; optionally writes previews, per-variant loss
/// logs and metrics into `out_dir`.
pub fn run(cfg: &E2eConfig, out_dir: Option<&Path>) -> CliResult<E2eMetrics> {
    if cfg.segments == 0 || cfg.n_views < 2 {
        return Err(CliError::config("need at least 1 segment and 2 views"));
    }
    let data = prepare(cfg)?;

    let mut variants: Vec<(String, TrainConfig)> = vec![("full".into(), cfg.train.clone())];
    if cfg.run_ablations {
        let mut no_event = cfg.train.clone();
        no_event.lambda_event = 0.0;
        variants.push(("no_event".into(), no_event));
        let mut events_only = cfg.train.clone();
        events_only.lambda_acc = 0.0;
        events_only.lambda_rgb = 0.0;
        variants.push(("events_only".into(), events_only));
    }

    let mut metrics = Vec::new();
    for (name, train_cfg) in &variants {
        let t = std::time::Instant::now();
        let (schedule, models) = train_variant(&data, cfg, train_cfg, name, out_dir)?;
        let m = eval_holdout(&data, cfg, &schedule, &models, name, out_dir)?;
        log::info!(
            "variant {name}: mean PSNR {:.2} dB, SSIM {:.4} ({:.1?})",
            m.mean_psnr,
            m.mean_ssim,
            t.elapsed()
        );
        if let Some(dir) = out_dir {
            for (si, params) in models.iter().enumerate() {
                io::write_checkpoint_file(
                    &dir.join(format!("{name}_seg{si}.bin")),
                    &io::Checkpoint {
                        params: params.clone(),
                        span: schedule.segments[si],
                        bounds: cfg.bounds,
                    },
                )?;
            }
        }
        metrics.push(m);
    }
    Ok(E2eMetrics { variants: metrics })
}
