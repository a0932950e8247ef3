//! Segment training: window sampling, ray batch construction, the four
//! losses, Adam, and the training loop.
//!
//! Gradient accumulation runs over fixed-size task chunks whose partial
//! buffers are summed in chunk order, so results are bitwise identical for
//! any thread count.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accum::{AccumulationImage, DecayAccumulator};
use crate::error::{Error, Result};
use crate::events::{log_clamped, BayerPattern, IntensityFrame, LOG_EPS};
use crate::field::{
    render_ray, render_ray_backward, Architecture, CylinderBounds, FieldParams, RenderConfig,
};
use crate::multiseg::{map_time, SegmentSpan};
use crate::sim::CameraModel;

/// One training view: its event index, ground-truth background, camera and
/// reference RGB frames.
pub struct ViewData {
    pub index: DecayAccumulator,
    pub background: IntensityFrame,
    pub camera: CameraModel,
    /// (timestamp us, linear RGB frame)
    pub ref_frames: Vec<(u64, IntensityFrame)>,
}

impl ViewData {
    fn ref_frame_at(&self, t: u64) -> Option<&IntensityFrame> {
        self.ref_frames.iter().find(|(rt, _)| *rt == t).map(|(_, f)| f)
    }
}

/// One segment's multi-view training data.
pub struct SegmentData {
    pub views: Vec<ViewData>,
    pub span: SegmentSpan,
}

impl SegmentData {
    pub fn validate(&self) -> Result<()> {
        if self.views.len() < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 views, got {}",
                self.views.len()
            )));
        }
        if self.span.length() == 0 {
            return Err(Error::invalid("segment has zero length"));
        }
        for (k, v) in self.views.iter().enumerate() {
            v.camera.validate()?;
            let (w, h) = (usize::from(v.camera.width), usize::from(v.camera.height));
            if v.background.width() != w || v.background.height() != h || v.background.channels() != 3
            {
                return Err(Error::invalid(format!("view {k}: background shape mismatch")));
            }
            if usize::from(v.index.width()) != w || usize::from(v.index.height()) != h {
                return Err(Error::invalid(format!("view {k}: event index shape mismatch")));
            }
            for t in [self.span.t_start, self.span.t_end] {
                let f = v
                    .ref_frame_at(t)
                    .ok_or_else(|| Error::invalid(format!("view {k}: missing reference frame at {t}")))?;
                if f.width() != w || f.height() != h || f.channels() != 3 {
                    return Err(Error::invalid(format!("view {k}: reference frame shape mismatch")));
                }
            }
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }
}

/// All training knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_event: f64,
    pub lambda_acc: f64,
    pub lambda_rgb: f64,
    pub lambda_sparsity: f64,
    /// N_sp.anneal for the sparsity weight gamma_n = 1 - exp(-n / N)
    pub sparsity_anneal_iters: f64,
    pub window_frac_min: f64,
    pub window_frac_max: f64,
    pub positive_fraction: f64,
    /// share of the batch spent on reference-frame RGB rays
    pub rgb_batch_fraction: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// iterations to sweep the encoding anneal from 0 to all bands
    pub enc_anneal_iters: u64,
    pub n_coarse: usize,
    pub n_fine: usize,
    /// accumulation decay for event-loss targets
    pub decay: f64,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_event: 1.0,
            lambda_acc: 1e-2,
            lambda_rgb: 1.0,
            lambda_sparsity: 1e-2,
            sparsity_anneal_iters: 4e4,
            window_frac_min: 0.10,
            window_frac_max: 0.30,
            positive_fraction: 0.10,
            rgb_batch_fraction: 0.25,
            batch_size: 512,
            iterations: 20_000,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            enc_anneal_iters: 10_000,
            n_coarse: 64,
            n_fine: 64,
            decay: 0.93,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, l) in [
            ("lambda_event", self.lambda_event),
            ("lambda_acc", self.lambda_acc),
            ("lambda_rgb", self.lambda_rgb),
            ("lambda_sparsity", self.lambda_sparsity),
        ] {
            if l < 0.0 {
                return Err(Error::invalid(format!("{name} must be >= 0")));
            }
        }
        if !(self.window_frac_min > 0.0
            && self.window_frac_min <= self.window_frac_max
            && self.window_frac_max < 1.0)
        {
            return Err(Error::invalid("window fractions must satisfy 0 < min <= max < 1"));
        }
        if !(0.0..1.0).contains(&self.positive_fraction) || !(0.0..1.0).contains(&self.rgb_batch_fraction) {
            return Err(Error::invalid("fractions must be in [0, 1)"));
        }
        if self.batch_size == 0 || self.n_coarse == 0 {
            return Err(Error::invalid("batch_size and n_coarse must be positive"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid("decay must be in (0, 1]"));
        }
        Ok(())
    }
}

/// A sampled training window.
#[derive(Debug, Clone, Copy)]
pub struct WindowSample {
    pub t0: u64,
    pub t1: u64,
    /// duration before clamping the window start into the segment
    pub raw_duration: f64,
}

/// Draws `t1 ~ U[t_start, t_end]` and a duration uniform in
/// `[frac_min, frac_max] * L`, clamping the start into the segment.
pub fn sample_window(
    span: &SegmentSpan,
    frac_min: f64,
    frac_max: f64,
    rng: &mut ChaCha8Rng,
) -> WindowSample {
    let l = span.length() as f64;
    let t1 = span.t_start as f64 + rng.gen::<f64>() * l;
    let dur = (frac_min + rng.gen::<f64>() * (frac_max - frac_min)) * l;
    let t0 = (t1 - dur).max(span.t_start as f64);
    WindowSample {
        t0: t0.round() as u64,
        t1: t1.round() as u64,
        raw_duration: dur,
    }
}

/// One ray reference in a sampling batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RayBatchEntry {
    pub view: usize,
    pub x: u16,
    pub y: u16,
    /// drawn from the event-pixel pool
    pub positive: bool,
}

/// Builds a per-view-balanced ray batch: each view contributes
/// `batch_size / K` rays, `positive_fraction` of them from pixels with a
/// nonzero accumulated signal and the rest uniform over all pixels. Views
/// without event pixels fall back to uniform sampling.
pub fn build_batch(
    acc_images: &[AccumulationImage],
    batch_size: usize,
    positive_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RayBatchEntry>> {
    let k = acc_images.len();
    if k == 0 || batch_size % k != 0 {
        return Err(Error::invalid(format!(
            "batch size {batch_size} not divisible by view count {k}"
        )));
    }
    let quota = batch_size / k;
    let mut batch = Vec::with_capacity(batch_size);
    for (view, acc) in acc_images.iter().enumerate() {
        let positives = acc.nonzero_pixels();
        let mut n_pos = (quota as f64 * positive_fraction).round() as usize;
        if positives.is_empty() && n_pos > 0 {
            log::debug!("view {view}: no event pixels, positive quota falls back to uniform");
            n_pos = 0;
        }
        for _ in 0..n_pos {
            let (x, y) = positives[rng.gen_range(0..positives.len())];
            batch.push(RayBatchEntry {
                view,
                x,
                y,
                positive: true,
            });
        }
        for _ in n_pos..quota {
            let x = rng.gen_range(0..acc.width());
            let y = rng.gen_range(0..acc.height());
            batch.push(RayBatchEntry {
                view,
                x,
                y,
                positive: false,
            });
        }
    }
    Ok(batch)
}

/// Aligned per-view inputs for the event loss.
pub struct EventLossView<'a> {
    pub pred_t0: &'a [[f64; 3]],
    pub pred_t1: &'a [[f64; 3]],
    pub target: &'a [f64],
    pub pixels: &'a [(u16, u16)],
}

/// Event-window MSE in log space, averaged over rays within each view and
/// then over views: `mean_k mean_i (E_i - F(log C(t1) - log C(t0)))^2`.
pub fn loss_event(views: &[EventLossView], pattern: &BayerPattern) -> Result<f64> {
    let mut total = 0.0;
    for v in views {
        let mut se = 0.0;
        for i in 0..v.target.len() {
            let c = pattern.channel_at(usize::from(v.pixels[i].0), usize::from(v.pixels[i].1));
            let p0 = v.pred_t0[i][c];
            let p1 = v.pred_t1[i][c];
            if !p0.is_finite() || !p1.is_finite() {
                return Err(Error::invalid("non-finite prediction in event loss"));
            }
            let diff = log_clamped(p1, LOG_EPS) - log_clamped(p0, LOG_EPS);
            let r = v.target[i] - diff;
            se += r * r;
        }
        total += se / v.target.len().max(1) as f64;
    }
    Ok(total / views.len().max(1) as f64)
}

/// Plain RGB MSE against reference frames, averaged over rays and channels
/// within each view, then over views.
pub fn loss_rgb(pred: &[&[[f64; 3]]], reference: &[&[[f64; 3]]]) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::invalid("rgb loss: view count mismatch"));
    }
    let mut total = 0.0;
    for (p_view, r_view) in pred.iter().zip(reference) {
        if p_view.len() != r_view.len() {
            return Err(Error::invalid("rgb loss: ray count mismatch"));
        }
        let mut se = 0.0;
        for (p, r) in p_view.iter().zip(r_view.iter()) {
            for c in 0..3 {
                let d = p[c] - r[c];
                se += d * d;
            }
        }
        total += se / (3 * p_view.len().max(1)) as f64;
    }
    Ok(total / pred.len().max(1) as f64)
}

/// Aligned per-view inputs for the accumulation loss.
pub struct AccLossView<'a> {
    pub pred_t1: &'a [[f64; 3]],
    /// reference frame RGB at the same pixels
    pub ref_rgb: &'a [[f64; 3]],
    /// accumulated events from the reference time to t1
    pub target: &'a [f64],
    pub pixels: &'a [(u16, u16)],
}

/// Accumulation MSE tying predictions at `t1` to the nearest reference
/// frame: `mean_k mean_i (E(t_ref, t1) - F(log C(t1) - log Cref))^2`.
pub fn loss_acc(views: &[AccLossView], pattern: &BayerPattern) -> Result<f64> {
    let mut total = 0.0;
    for v in views {
        let mut se = 0.0;
        for i in 0..v.target.len() {
            let c = pattern.channel_at(usize::from(v.pixels[i].0), usize::from(v.pixels[i].1));
            let diff = log_clamped(v.pred_t1[i][c], LOG_EPS) - log_clamped(v.ref_rgb[i][c], LOG_EPS);
            let r = v.target[i] - diff;
            se += r * r;
        }
        total += se / v.target.len().max(1) as f64;
    }
    Ok(total / views.len().max(1) as f64)
}

/// Sparsity annealing weight `gamma_n = 1 - exp(-n / N)`.
pub fn sparsity_gamma(n: u64, anneal_iters: f64) -> f64 {
    1.0 - (-(n as f64) / anneal_iters).exp()
}

/// Per-ray foreground penalty `gamma_n * mean(1 - T_bg)`.
pub fn loss_sparsity(bg_opacities: &[f64], n: u64, anneal_iters: f64) -> f64 {
    if bg_opacities.is_empty() {
        return 0.0;
    }
    let mean: f64 = bg_opacities.iter().map(|t| 1.0 - t).sum::<f64>() / bg_opacities.len() as f64;
    sparsity_gamma(n, anneal_iters) * mean
}

/// The four raw (unweighted) loss terms of one iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub event: f64,
    pub acc: f64,
    pub rgb: f64,
    pub sparsity: f64,
}

/// Weighted total objective.
pub fn total_loss(c: &LossComponents, cfg: &TrainConfig) -> f64 {
    cfg.lambda_event * c.event
        + cfg.lambda_acc * c.acc
        + cfg.lambda_rgb * c.rgb
        + cfg.lambda_sparsity * c.sparsity
}

/// Adam moment buffers.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }
}

/// Standard bias-corrected Adam update.
pub fn adam_step(
    params: &mut FieldParams,
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if grad.len() != params.data.len() || state.m.len() != grad.len() {
        return Err(Error::invalid("adam: shape mismatch"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..grad.len() {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// One ray's work for an iteration.
#[derive(Debug, Clone, Copy)]
pub enum RayTask {
    /// render at t0 and t1; event + accumulation supervision
    Event {
        view: usize,
        x: u16,
        y: u16,
        target_event: f64,
        target_acc: f64,
        /// clamped log of the reference frame at this pixel's mosaic channel
        log_ref: f64,
    },
    /// render at a reference timestamp; RGB supervision
    Rgb {
        view: usize,
        x: u16,
        y: u16,
        t_local: f64,
        ref_rgb: [f64; 3],
    },
}

/// Fixed iteration context for [`evaluate_batch`].
pub struct BatchContext<'a> {
    pub segment: &'a SegmentData,
    pub bounds: &'a CylinderBounds,
    pub pattern: &'a BayerPattern,
    pub t0_local: f64,
    pub t1_local: f64,
    /// sparsity weight gamma_n of this iteration
    pub gamma: f64,
    pub cfg: &'a TrainConfig,
    pub render: RenderConfig,
    /// rng namespace for this iteration's renders
    pub rng_base: u64,
}

fn task_rng(base: u64, task: usize, slot: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        base.wrapping_add((task as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add(slot.wrapping_mul(0xD1B5_4A32_D192_ED03)),
    )
}

#[derive(Default, Clone)]
struct ChunkAccum {
    se_event: f64,
    se_acc: f64,
    se_rgb: f64,
    sum_fg: f64,
    n_event: usize,
    n_rgb: usize,
    n_renders: usize,
}

/// tasks per accumulation chunk; fixed so that parallel and serial
/// summation orders coincide
const TASK_CHUNK: usize = 16;

#[inline]
fn d_log_clamped(v: f64) -> f64 {
    if v > LOG_EPS {
        1.0 / v
    } else {
        0.0
    }
}

/// Forward (and optionally backward) pass over one iteration's ray tasks.
/// Losses are averaged per view and over views; gradients accumulate the
/// weighted total objective.
pub fn evaluate_batch(
    params: &FieldParams,
    ctx: &BatchContext,
    tasks: &[RayTask],
    mut grad: Option<&mut Vec<f64>>,
) -> Result<LossComponents> {
    let k = ctx.segment.n_views() as f64;
    let n_event_rays = tasks.iter().filter(|t| matches!(t, RayTask::Event { .. })).count();
    let n_rgb_rays = tasks.len() - n_event_rays;
    let n_event_per_view = (n_event_rays as f64 / k).max(1.0);
    let n_rgb_per_view = (n_rgb_rays as f64 / k).max(1.0);
    let n_renders_total = (2 * n_event_rays + n_rgb_rays).max(1) as f64;
    let want_grad = grad.is_some();

    let cfg = ctx.cfg;
    let process_chunk = |(chunk_idx, chunk): (usize, &[RayTask])| -> Result<(ChunkAccum, Option<Vec<f64>>)> {
        let mut acc = ChunkAccum::default();
        let mut chunk_grad = want_grad.then(|| vec![0.0f64; params.data.len()]);
        for (i, task) in chunk.iter().enumerate() {
            let task_idx = chunk_idx * TASK_CHUNK + i;
            match *task {
                RayTask::Event {
                    view,
                    x,
                    y,
                    target_event,
                    target_acc,
                    log_ref,
                } => {
                    let v = &ctx.segment.views[view];
                    let mut jitter_rng = task_rng(ctx.rng_base, task_idx, 2);
                    let (ox, oy) = (jitter_rng.gen::<f64>(), jitter_rng.gen::<f64>());
                    let bg = [
                        v.background.get(usize::from(x), usize::from(y), 0),
                        v.background.get(usize::from(x), usize::from(y), 1),
                        v.background.get(usize::from(x), usize::from(y), 2),
                    ];
                    let ray0 = v.camera.pixel_ray(x, y, ox, oy, view, ctx.t0_local);
                    let ray1 = v.camera.pixel_ray(x, y, ox, oy, view, ctx.t1_local);
                    // identical depth draws at both times, so the sampling
                    // noise cancels in the rendered log difference
                    let mut rng0 = task_rng(ctx.rng_base, task_idx, 0);
                    let mut rng1 = task_rng(ctx.rng_base, task_idx, 0);
                    let (res0, cache0) = render_ray(params, &ray0, ctx.bounds, bg, &ctx.render, &mut rng0)?;
                    let (res1, cache1) = render_ray(params, &ray1, ctx.bounds, bg, &ctx.render, &mut rng1)?;

                    let ch = ctx.pattern.channel_at(usize::from(x), usize::from(y));
                    let p0 = res0.color[ch];
                    let p1 = res1.color[ch];
                    let diff_event = log_clamped(p1, LOG_EPS) - log_clamped(p0, LOG_EPS);
                    let r_event = diff_event - target_event;
                    let diff_acc = log_clamped(p1, LOG_EPS) - log_ref;
                    let r_acc = diff_acc - target_acc;
                    acc.se_event += r_event * r_event;
                    acc.se_acc += r_acc * r_acc;
                    acc.sum_fg += (1.0 - res0.bg_opacity) + (1.0 - res1.bg_opacity);
                    acc.n_event += 1;
                    acc.n_renders += 2;

                    if let Some(g) = chunk_grad.as_mut() {
                        let w_event = cfg.lambda_event * 2.0 * r_event / (k * n_event_per_view);
                        let w_acc = cfg.lambda_acc * 2.0 * r_acc / (k * n_event_per_view);
                        let d_tbg = cfg.lambda_sparsity * ctx.gamma / n_renders_total;
                        // d(total)/d(color1[ch]) and d/d(color0[ch])
                        let mut d1 = [0.0f64; 3];
                        d1[ch] = (w_event + w_acc) * d_log_clamped(p1);
                        let mut d0 = [0.0f64; 3];
                        d0[ch] = -w_event * d_log_clamped(p0);
                        if let Some(c0) = &cache0 {
                            render_ray_backward(params, c0, d0, -d_tbg, g)?;
                        }
                        if let Some(c1) = &cache1 {
                            render_ray_backward(params, c1, d1, -d_tbg, g)?;
                        }
                    }
                }
                RayTask::Rgb {
                    view,
                    x,
                    y,
                    t_local,
                    ref_rgb,
                } => {
                    let v = &ctx.segment.views[view];
                    let mut jitter_rng = task_rng(ctx.rng_base, task_idx, 2);
                    let (ox, oy) = (jitter_rng.gen::<f64>(), jitter_rng.gen::<f64>());
                    let bg = [
                        v.background.get(usize::from(x), usize::from(y), 0),
                        v.background.get(usize::from(x), usize::from(y), 1),
                        v.background.get(usize::from(x), usize::from(y), 2),
                    ];
                    let ray = v.camera.pixel_ray(x, y, ox, oy, view, t_local);
                    let mut rng = task_rng(ctx.rng_base, task_idx, 0);
                    let (res, cache) = render_ray(params, &ray, ctx.bounds, bg, &ctx.render, &mut rng)?;
                    let mut se = 0.0;
                    for c in 0..3 {
                        let d = res.color[c] - ref_rgb[c];
                        se += d * d;
                    }
                    acc.se_rgb += se;
                    acc.sum_fg += 1.0 - res.bg_opacity;
                    acc.n_rgb += 1;
                    acc.n_renders += 1;

                    if let Some(g) = chunk_grad.as_mut() {
                        let d_tbg = cfg.lambda_sparsity * ctx.gamma / n_renders_total;
                        let d_color = std::array::from_fn(|c| {
                            cfg.lambda_rgb * 2.0 * (res.color[c] - ref_rgb[c]) / (k * n_rgb_per_view * 3.0)
                        });
                        if let Some(cache) = &cache {
                            render_ray_backward(params, cache, d_color, -d_tbg, g)?;
                        }
                    }
                }
            }
        }
        Ok((acc, chunk_grad))
    };

    let results: Vec<(ChunkAccum, Option<Vec<f64>>)> = tasks
        .par_chunks(TASK_CHUNK)
        .enumerate()
        .map(process_chunk)
        .collect::<Result<Vec<_>>>()?;

    let mut total = ChunkAccum::default();
    for (acc, chunk_grad) in results {
        total.se_event += acc.se_event;
        total.se_acc += acc.se_acc;
        total.se_rgb += acc.se_rgb;
        total.sum_fg += acc.sum_fg;
        total.n_event += acc.n_event;
        total.n_rgb += acc.n_rgb;
        total.n_renders += acc.n_renders;
        if let (Some(g), Some(cg)) = (grad.as_deref_mut(), chunk_grad) {
            for (a, b) in g.iter_mut().zip(&cg) {
                *a += b;
            }
        }
    }

    Ok(LossComponents {
        event: total.se_event / (k * n_event_per_view),
        acc: total.se_acc / (k * n_event_per_view),
        rgb: total.se_rgb / (k * n_rgb_per_view * 3.0),
        sparsity: ctx.gamma * total.sum_fg / n_renders_total,
    })
}

/// Per-iteration record of the training log.
#[derive(Debug, Clone, Copy)]
pub struct IterationLog {
    pub iter: u64,
    pub components: LossComponents,
    pub total: f64,
    pub window: (u64, u64),
}

/// Builds one iteration's ray tasks: per-view balanced event rays drawn
/// from the window accumulation plus uniformly placed RGB rays at the
/// segment's reference timestamps.
#[allow(clippy::too_many_arguments)]
fn build_tasks(
    segment: &SegmentData,
    cfg: &TrainConfig,
    pattern: &BayerPattern,
    acc_images: &[AccumulationImage],
    acc_ref_images: &[AccumulationImage],
    acc_ref_sign: f64,
    t_ref: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RayTask>> {
    let k = segment.n_views();
    let n_rgb = {
        let per_view = ((cfg.batch_size as f64 * cfg.rgb_batch_fraction) / k as f64).round() as usize;
        per_view * k
    };
    let n_event = cfg.batch_size - n_rgb;
    if n_event % k != 0 {
        return Err(Error::invalid(format!(
            "event ray budget {n_event} not divisible by {k} views"
        )));
    }

    let event_entries = build_batch(acc_images, n_event, cfg.positive_fraction, rng)?;
    let mut tasks = Vec::with_capacity(cfg.batch_size);
    for e in &event_entries {
        let v = &segment.views[e.view];
        let ref_frame = v.ref_frame_at(t_ref).expect("validated");
        let ch = pattern.channel_at(usize::from(e.x), usize::from(e.y));
        tasks.push(RayTask::Event {
            view: e.view,
            x: e.x,
            y: e.y,
            target_event: acc_images[e.view].get(e.x, e.y),
            target_acc: acc_ref_sign * acc_ref_images[e.view].get(e.x, e.y),
            log_ref: log_clamped(ref_frame.get(usize::from(e.x), usize::from(e.y), ch), LOG_EPS),
        });
    }

    let span = segment.span;
    for view in 0..k {
        let v = &segment.views[view];
        for _ in 0..n_rgb / k {
            let x = rng.gen_range(0..v.camera.width);
            let y = rng.gen_range(0..v.camera.height);
            let t_ref_choice = if rng.gen_bool(0.5) { span.t_start } else { span.t_end };
            let f = v.ref_frame_at(t_ref_choice).expect("validated");
            tasks.push(RayTask::Rgb {
                view,
                x,
                y,
                t_local: map_time(&span, t_ref_choice)?,
                ref_rgb: [
                    f.get(usize::from(x), usize::from(y), 0),
                    f.get(usize::from(x), usize::from(y), 1),
                    f.get(usize::from(x), usize::from(y), 2),
                ],
            });
        }
    }
    Ok(tasks)
}

/// Trains one segment model. Deterministic under a fixed seed for any
/// thread count.
pub fn train_segment(
    segment: &SegmentData,
    arch: Architecture,
    bounds: &CylinderBounds,
    cfg: &TrainConfig,
) -> Result<(FieldParams, Vec<IterationLog>)> {
    train_segment_with_progress(segment, arch, bounds, cfg, |_, _, _| Ok(()))
}

/// As [`train_segment`], invoking `progress(iter, params, log_entry)` at
/// every logged iteration.
pub fn train_segment_with_progress(
    segment: &SegmentData,
    arch: Architecture,
    bounds: &CylinderBounds,
    cfg: &TrainConfig,
    mut progress: impl FnMut(u64, &FieldParams, &IterationLog) -> Result<()>,
) -> Result<(FieldParams, Vec<IterationLog>)> {
    segment.validate()?;
    cfg.validate()?;
    let pattern = BayerPattern::default();
    let mut params = FieldParams::init(arch, cfg.seed);
    let mut adam = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5EED);
    let mut log = Vec::new();
    let mut grad = vec![0.0f64; params.len()];

    let max_bands = arch
        .encoding
        .n_spatial_freqs
        .max(arch.encoding.n_temporal_freqs)
        .max(arch.encoding.n_dir_freqs) as f64;
    let span = segment.span;

    for n in 0..cfg.iterations {
        let alpha = if cfg.enc_anneal_iters == 0 {
            f64::INFINITY
        } else {
            max_bands * ((n as f64 / cfg.enc_anneal_iters as f64).min(1.0))
        };
        let gamma = sparsity_gamma(n, cfg.sparsity_anneal_iters);
        let window = sample_window(&span, cfg.window_frac_min, cfg.window_frac_max, &mut rng);

        // nearest reference endpoint to the window end
        let t_ref = if window.t1.abs_diff(span.t_start) <= window.t1.abs_diff(span.t_end) {
            span.t_start
        } else {
            span.t_end
        };

        let mut acc_images = Vec::with_capacity(segment.n_views());
        let mut acc_ref_images = Vec::with_capacity(segment.n_views());
        let acc_ref_sign = if window.t1 >= t_ref { 1.0 } else { -1.0 };
        for v in &segment.views {
            acc_images.push(v.index.query_window(window.t0, window.t1)?);
            let (a, b) = if window.t1 >= t_ref {
                (t_ref, window.t1)
            } else {
                (window.t1, t_ref)
            };
            acc_ref_images.push(v.index.query_window(a, b)?);
        }

        let tasks = build_tasks(
            segment,
            cfg,
            &pattern,
            &acc_images,
            &acc_ref_images,
            acc_ref_sign,
            t_ref,
            &mut rng,
        )?;

        let ctx = BatchContext {
            segment,
            bounds,
            pattern: &pattern,
            t0_local: map_time(&span, window.t0)?,
            t1_local: map_time(&span, window.t1)?,
            gamma,
            cfg,
            render: RenderConfig {
                n_coarse: cfg.n_coarse,
                n_fine: cfg.n_fine,
                stratified: true,
                alpha,
            },
            rng_base: cfg.seed ^ n.wrapping_mul(0xA076_1D64_78BD_642F),
        };

        grad.fill(0.0);
        let components = evaluate_batch(&params, &ctx, &tasks, Some(&mut grad))?;
        let total = total_loss(&components, cfg);
        if !total.is_finite() {
            return Err(Error::Diverged {
                iteration: n,
                detail: format!("loss components {components:?}"),
            });
        }
        adam_step(&mut params, &grad, &mut adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)?;

        if cfg.log_every > 0 && (n % cfg.log_every == 0 || n + 1 == cfg.iterations) {
            let entry = IterationLog {
                iter: n,
                components,
                total,
                window: (window.t0, window.t1),
            };
            progress(n, &params, &entry)?;
            log.push(entry);
        }
    }
    params.validate()?;
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accum::DecayAccumulator;
    use crate::events::{Event, EventStream, Thresholds};

    #[test]
    fn window_durations_and_mean() {
        let span = SegmentSpan {
            t_start: 1_000_000,
            t_end: 2_000_000,
        };
        let l = span.length() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mean_t1 = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let w = sample_window(&span, 0.10, 0.30, &mut rng);
            assert!(w.raw_duration >= 0.10 * l && w.raw_duration <= 0.30 * l);
            assert!(w.t0 >= span.t_start && w.t1 <= span.t_end && w.t0 <= w.t1);
            mean_t1 += w.t1 as f64 / n as f64;
        }
        // mean of U[start, end] within 3 sigma of the midpoint
        let sigma = l / (12.0f64).sqrt() / (n as f64).sqrt();
        assert!((mean_t1 - 1_500_000.0).abs() < 3.0 * sigma, "mean t1 {mean_t1}");
    }

    #[test]
    fn window_is_reproducible() {
        let span = SegmentSpan { t_start: 0, t_end: 1000 };
        let a = sample_window(&span, 0.1, 0.3, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_window(&span, 0.1, 0.3, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!((a.t0, a.t1), (b.t0, b.t1));
    }

    fn acc_image(width: u16, height: u16, nonzero: &[(u16, u16)]) -> AccumulationImage {
        let mut vals = vec![0.0; usize::from(width) * usize::from(height)];
        for &(x, y) in nonzero {
            vals[usize::from(y) * usize::from(width) + usize::from(x)] = 0.25;
        }
        AccumulationImage::from_vec(width, height, vals).unwrap()
    }

    #[test]
    fn batch_composition_exact_counts() {
        let acc: Vec<AccumulationImage> = (0..6)
            .map(|_| acc_image(16, 16, &[(1, 1), (2, 3), (5, 5), (9, 9)]))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = build_batch(&acc, 600, 0.10, &mut rng).unwrap();
        assert_eq!(batch.len(), 600);
        for view in 0..6 {
            let rays: Vec<_> = batch.iter().filter(|e| e.view == view).collect();
            assert_eq!(rays.len(), 100);
            let positives = rays.iter().filter(|e| e.positive).count();
            assert_eq!(positives, 10);
        }
    }

    #[test]
    fn batch_positive_rays_have_events() {
        let acc = vec![
            acc_image(8, 8, &[(0, 0), (7, 7)]),
            acc_image(8, 8, &[(3, 3)]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = build_batch(&acc, 40, 0.10, &mut rng).unwrap();
        for e in batch.iter().filter(|e| e.positive) {
            assert!(acc[e.view].get(e.x, e.y) != 0.0);
        }
    }

    #[test]
    fn batch_falls_back_without_events() {
        let acc = vec![acc_image(8, 8, &[]), acc_image(8, 8, &[])];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = build_batch(&acc, 20, 0.10, &mut rng).unwrap();
        assert_eq!(batch.len(), 20);
        assert!(batch.iter().all(|e| !e.positive));
    }

    #[test]
    fn batch_rejects_indivisible_size() {
        let acc = vec![acc_image(4, 4, &[]), acc_image(4, 4, &[]), acc_image(4, 4, &[])];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(build_batch(&acc, 100, 0.1, &mut rng).is_err());
    }

    #[test]
    fn loss_event_cases() {
        let pattern = BayerPattern::rggb();
        // exact satisfaction -> 0
        let pred0 = [[0.5, 0.5, 0.5]];
        let pred1 = [[0.5, 0.5, 0.5]];
        let views = [EventLossView {
            pred_t0: &pred0,
            pred_t1: &pred1,
            target: &[0.0],
            pixels: &[(0, 0)],
        }];
        assert_eq!(loss_event(&views, &pattern).unwrap(), 0.0);

        // doubling with target 0: (ln 2)^2
        let pred1 = [[1.0, 1.0, 1.0]];
        let views = [EventLossView {
            pred_t0: &pred0,
            pred_t1: &pred1,
            target: &[0.0],
            pixels: &[(0, 0)],
        }];
        let l = loss_event(&views, &pattern).unwrap();
        assert!((l - std::f64::consts::LN_2.powi(2)).abs() < 1e-12);
        assert!((l - 0.4805).abs() < 1e-4);

        // fixed predictions, doubled target: quadruples the loss when the
        // prediction already matched the original target exactly
        let target = [std::f64::consts::LN_2];
        let views = [EventLossView {
            pred_t0: &pred0,
            pred_t1: &pred1,
            target: &target,
            pixels: &[(0, 0)],
        }];
        assert!(loss_event(&views, &pattern).unwrap() < 1e-12);
        let doubled = [2.0 * std::f64::consts::LN_2];
        let views = [EventLossView {
            pred_t0: &pred0,
            pred_t1: &pred1,
            target: &doubled,
            pixels: &[(0, 0)],
        }];
        let l4 = loss_event(&views, &pattern).unwrap();
        assert!((l4 - std::f64::consts::LN_2.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn loss_rgb_cases() {
        let p: Vec<[f64; 3]> = vec![[0.2, 0.4, 0.6]];
        let r = p.clone();
        assert_eq!(loss_rgb(&[&p], &[&r]).unwrap(), 0.0);

        let shifted: Vec<[f64; 3]> = vec![[0.3, 0.5, 0.7]];
        let l = loss_rgb(&[&shifted], &[&r]).unwrap();
        assert!((l - 0.01).abs() < 1e-12);

        // brute-force oracle on random data
        use rand::prelude::*;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pred: Vec<[f64; 3]> = (0..50).map(|_| std::array::from_fn(|_| rng.gen())).collect();
        let refr: Vec<[f64; 3]> = (0..50).map(|_| std::array::from_fn(|_| rng.gen())).collect();
        let mut se = 0.0;
        for i in 0..50 {
            for c in 0..3 {
                se += (pred[i][c] - refr[i][c]).powi(2);
            }
        }
        let want = se / 150.0;
        assert!((loss_rgb(&[&pred], &[&refr]).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn loss_acc_cases() {
        let pattern = BayerPattern::rggb();
        // prediction equals reference, no events -> 0
        let pred = [[0.5, 0.5, 0.5]];
        let refs = [[0.5, 0.5, 0.5]];
        let views = [AccLossView {
            pred_t1: &pred,
            ref_rgb: &refs,
            target: &[0.0],
            pixels: &[(0, 0)],
        }];
        assert_eq!(loss_acc(&views, &pattern).unwrap(), 0.0);

        // hand-built identity: E = C, pred/ref ratio = exp(C)
        let c = 0.25f64;
        let pred = [[0.5 * c.exp(), 0.5, 0.5]];
        let target = [c];
        let views = [AccLossView {
            pred_t1: &pred,
            ref_rgb: &refs,
            target: &target,
            pixels: &[(0, 0)], // channel R at (0,0)
        }];
        assert!(loss_acc(&views, &pattern).unwrap() < 1e-20);
    }

    #[test]
    fn sparsity_cases() {
        assert_eq!(loss_sparsity(&[0.0, 0.0], 0, 4e4), 0.0);
        // all foreground at n = N: 1 - e^-1
        let l = loss_sparsity(&[0.0, 0.0, 0.0], 40_000, 4e4);
        assert!((l - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert!((l - 0.6321).abs() < 1e-4);
        // all background -> 0 at any n
        assert_eq!(loss_sparsity(&[1.0, 1.0], 123_456, 4e4), 0.0);
    }

    #[test]
    fn gamma_monotone_and_bounded() {
        let mut prev = -1.0;
        for n in (0..200_000).step_by(1000) {
            let g = sparsity_gamma(n, 4e4);
            assert!(g >= prev);
            assert!((0.0..1.0).contains(&g) || g == 0.0);
            prev = g;
        }
    }

    #[test]
    fn total_loss_weighting() {
        let cfg = TrainConfig::default();
        let zero = LossComponents::default();
        assert_eq!(total_loss(&zero, &cfg), 0.0);
        let ones = LossComponents {
            event: 1.0,
            acc: 1.0,
            rgb: 1.0,
            sparsity: 1.0,
        };
        assert!((total_loss(&ones, &cfg) - 2.02).abs() < 1e-12);
        // ablation flags zero out terms exactly
        let mut ablate = cfg.clone();
        ablate.lambda_event = 0.0;
        assert!((total_loss(&ones, &ablate) - 1.02).abs() < 1e-12);
    }

    fn tiny_arch() -> Architecture {
        Architecture {
            encoding: crate::field::EncodingConfig {
                n_spatial_freqs: 2,
                n_temporal_freqs: 1,
                n_dir_freqs: 1,
                include_identity: true,
                anneal_alpha: f64::INFINITY,
            },
            hidden_layers: 2,
            hidden_dim: 8,
            color_hidden_dim: 6,
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = FieldParams::init(tiny_arch(), 1);
        let before = p.data.clone();
        let mut state = AdamState::new(p.len());
        let grad = vec![0.0; p.len()];
        adam_step(&mut p, &grad, &mut state, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p.data, before);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = FieldParams::zeros(tiny_arch());
        let mut state = AdamState::new(p.len());
        let mut grad = vec![0.0; p.len()];
        grad[0] = 1.0;
        adam_step(&mut p, &grad, &mut state, 0.1, 0.9, 0.999, 1e-8).unwrap();
        // bias correction makes m_hat / sqrt(v_hat) = 1 at t = 1 up to eps
        assert!((p.data[0] + 0.1).abs() < 1e-6, "step {}", p.data[0]);
        assert_eq!(p.data[1], 0.0);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = FieldParams::zeros(tiny_arch());
        let mut state = AdamState::new(p.len());
        let grad = vec![0.0; p.len() + 1];
        assert!(adam_step(&mut p, &grad, &mut state, 0.1, 0.9, 0.999, 1e-8).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = FieldParams::init(tiny_arch(), 3);
            let mut state = AdamState::new(p.len());
            for i in 0..50u64 {
                let grad: Vec<f64> = (0..p.len()).map(|j| ((i + j as u64) % 7) as f64 * 0.01 - 0.02).collect();
                adam_step(&mut p, &grad, &mut state, 0.01, 0.9, 0.999, 1e-8).unwrap();
            }
            p.data
        };
        assert_eq!(run(), run());
    }

    // --- mini segment fixtures for the training-path tests ---

    fn mini_segment(k: usize, width: u16, height: u16) -> SegmentData {
        use crate::field::Vec3;
        let span = SegmentSpan {
            t_start: 0,
            t_end: 100_000,
        };
        let mut views = Vec::new();
        for i in 0..k {
            let angle = i as f64 / k as f64 * std::f64::consts::TAU;
            let camera = CameraModel::look_at(
                Vec3::new(2.0 * angle.cos(), 0.3, 2.0 * angle.sin()),
                Vec3::new(0.0, 0.0, 0.0),
                f64::from(width) * 1.2,
                f64::from(width) * 1.2,
                width,
                height,
            );
            // a couple of synthetic events so positive sampling has a pool
            let events = vec![
                Event::new(10_000, width / 2, height / 2, 1),
                Event::new(50_000, width / 4, height / 4, -1),
            ];
            let stream = EventStream::new(width, height, events);
            let index =
                DecayAccumulator::build(&stream, &Thresholds::symmetric(0.2).unwrap(), 1.0).unwrap();
            let background = IntensityFrame::filled(usize::from(width), usize::from(height), 3, 0.5);
            let ref_frame = IntensityFrame::filled(usize::from(width), usize::from(height), 3, 0.5);
            views.push(ViewData {
                index,
                background,
                camera,
                ref_frames: vec![(span.t_start, ref_frame.clone()), (span.t_end, ref_frame)],
            });
        }
        SegmentData { views, span }
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let segment = mini_segment(2, 8, 8);
        let bounds = CylinderBounds::new(0.8, -0.8, 0.8).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            n_coarse: 6,
            n_fine: 0,
            ..TrainConfig::default()
        };
        let pattern = BayerPattern::default();
        let params = FieldParams::init(tiny_arch(), 11);

        let tasks = vec![
            RayTask::Event {
                view: 0,
                x: 4,
                y: 4,
                target_event: 0.2,
                target_acc: 0.1,
                log_ref: (0.5f64).ln(),
            },
            RayTask::Event {
                view: 1,
                x: 3,
                y: 5,
                target_event: -0.2,
                target_acc: 0.0,
                log_ref: (0.5f64).ln(),
            },
            RayTask::Rgb {
                view: 0,
                x: 2,
                y: 2,
                t_local: -1.0,
                ref_rgb: [0.4, 0.5, 0.6],
            },
            RayTask::Rgb {
                view: 1,
                x: 6,
                y: 3,
                t_local: 1.0,
                ref_rgb: [0.5, 0.5, 0.5],
            },
        ];
        let ctx = BatchContext {
            segment: &segment,
            bounds: &bounds,
            pattern: &pattern,
            t0_local: -0.5,
            t1_local: 0.5,
            gamma: 0.37,
            cfg: &cfg,
            render: RenderConfig {
                n_coarse: 6,
                n_fine: 0,
                stratified: true,
                alpha: f64::INFINITY,
            },
            rng_base: 424_242,
        };

        let mut grad = vec![0.0; params.len()];
        let comps = evaluate_batch(&params, &ctx, &tasks, Some(&mut grad)).unwrap();
        let analytic_total = total_loss(&comps, &cfg);
        assert!(analytic_total.is_finite());

        let eval = |p: &FieldParams| {
            let c = evaluate_batch(p, &ctx, &tasks, None).unwrap();
            total_loss(&c, &cfg)
        };
        let h = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut checked = 0;
        while checked < 20 {
            let i = rng.gen_range(0..params.len());
            if grad[i].abs() < 1e-6 {
                continue;
            }
            let mut plus = params.clone();
            plus.data[i] += h;
            let mut minus = params.clone();
            minus.data[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs());
            assert!(rel < 1e-4, "param {i}: analytic {} vs fd {fd}", grad[i]);
            checked += 1;
        }
    }

    #[test]
    fn evaluate_batch_is_deterministic() {
        let segment = mini_segment(2, 8, 8);
        let bounds = CylinderBounds::new(0.8, -0.8, 0.8).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            n_coarse: 4,
            n_fine: 2,
            ..TrainConfig::default()
        };
        let pattern = BayerPattern::default();
        let params = FieldParams::init(tiny_arch(), 2);
        let tasks = vec![
            RayTask::Rgb {
                view: 0,
                x: 4,
                y: 4,
                t_local: 0.0,
                ref_rgb: [0.1, 0.2, 0.3],
            };
            10
        ];
        let ctx = BatchContext {
            segment: &segment,
            bounds: &bounds,
            pattern: &pattern,
            t0_local: -0.5,
            t1_local: 0.5,
            gamma: 0.5,
            cfg: &cfg,
            render: RenderConfig {
                n_coarse: 4,
                n_fine: 2,
                stratified: true,
                alpha: 2.0,
            },
            rng_base: 7,
        };
        let mut g1 = vec![0.0; params.len()];
        let c1 = evaluate_batch(&params, &ctx, &tasks, Some(&mut g1)).unwrap();
        let mut g2 = vec![0.0; params.len()];
        let c2 = evaluate_batch(&params, &ctx, &tasks, Some(&mut g2)).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn train_segment_smoke_and_determinism() {
        let segment = mini_segment(2, 8, 8);
        let bounds = CylinderBounds::new(0.8, -0.8, 0.8).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            iterations: 5,
            n_coarse: 4,
            n_fine: 2,
            log_every: 1,
            seed: 9,
            ..TrainConfig::default()
        };
        let arch = tiny_arch();
        let (p1, log1) = train_segment(&segment, arch, &bounds, &cfg).unwrap();
        let (p2, log2) = train_segment(&segment, arch, &bounds, &cfg).unwrap();
        assert_eq!(p1.data, p2.data);
        assert_eq!(log1.len(), log2.len());
        for (a, b) in log1.iter().zip(&log2) {
            assert_eq!(a.total, b.total);
        }
    }
}
