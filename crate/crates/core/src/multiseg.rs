//! Multi-segment scheduling: split a recording into overlapping segments,
//! map global time to segment-local time in [-1, 1], and cross-fade
//! renders inside overlap regions.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{render_ray, CylinderBounds, FieldParams, Ray, RenderConfig};

/// One segment's global time span, microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpan {
    pub t_start: u64,
    pub t_end: u64,
}

impl SegmentSpan {
    pub fn contains(&self, t: u64) -> bool {
        t >= self.t_start && t <= self.t_end
    }

    pub fn length(&self) -> u64 {
        self.t_end - self.t_start
    }
}

/// Segment spans with 10% overlaps between consecutive segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSchedule {
    pub segments: Vec<SegmentSpan>,
    pub t_end: u64,
    pub nominal_len: u64,
}

impl SegmentSchedule {
    /// Overlap region shared by segments `i` and `i + 1`.
    pub fn overlap(&self, i: usize) -> Option<SegmentSpan> {
        if i + 1 >= self.segments.len() {
            return None;
        }
        let a = self.segments[i];
        let b = self.segments[i + 1];
        if b.t_start >= a.t_end {
            return None;
        }
        Some(SegmentSpan {
            t_start: b.t_start,
            t_end: a.t_end,
        })
    }

    /// Segments covering a global time (one, or two inside an overlap).
    pub fn covering(&self, t: u64) -> Vec<usize> {
        self.segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.contains(t))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Splits `[0, t_end]` into segments of nominal length `len` with
/// boundaries at multiples of `len`, each extended by 5% of `len` on both
/// sides (clamped to the recording), so consecutive segments share exactly
/// 10% of a segment length.
pub fn make_schedule(t_end: u64, len: u64) -> Result<SegmentSchedule> {
    if len == 0 || len > t_end {
        return Err(Error::invalid(format!(
            "need 0 < segment length <= recording length, got {len} vs {t_end}"
        )));
    }
    let half_overlap = len / 20; // 0.05 L
    let n = t_end.div_ceil(len);
    let mut segments = Vec::with_capacity(n as usize);
    for i in 0..n {
        let nominal_start = i * len;
        let nominal_end = ((i + 1) * len).min(t_end);
        let t_start = nominal_start.saturating_sub(half_overlap);
        let t_end_i = (nominal_end + half_overlap).min(t_end);
        segments.push(SegmentSpan {
            t_start,
            t_end: t_end_i,
        });
    }
    Ok(SegmentSchedule {
        segments,
        t_end,
        nominal_len: len,
    })
}

/// Affine map of global time onto the segment's [-1, 1] domain.
pub fn map_time(span: &SegmentSpan, t_global: u64) -> Result<f64> {
    if !span.contains(t_global) {
        return Err(Error::OutOfRange(format!(
            "t = {t_global} outside segment [{}, {}]",
            span.t_start, span.t_end
        )));
    }
    let l = span.length();
    if l == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * (t_global - span.t_start) as f64 / l as f64 - 1.0)
}

/// Rendering context shared by all segments of one recording.
pub struct MultiSegmentRenderer<'a> {
    pub schedule: &'a SegmentSchedule,
    pub models: &'a [FieldParams],
    pub bounds: CylinderBounds,
    pub config: RenderConfig,
}

impl<'a> MultiSegmentRenderer<'a> {
    pub fn new(
        schedule: &'a SegmentSchedule,
        models: &'a [FieldParams],
        bounds: CylinderBounds,
        config: RenderConfig,
    ) -> Result<Self> {
        if models.len() != schedule.segments.len() {
            return Err(Error::invalid(format!(
                "{} models for {} segments",
                models.len(),
                schedule.segments.len()
            )));
        }
        Ok(MultiSegmentRenderer {
            schedule,
            models,
            bounds,
            config,
        })
    }

    fn render_with(
        &self,
        segment: usize,
        ray: &Ray,
        t_global: u64,
        bg: [f64; 3],
        rng: &mut ChaCha8Rng,
    ) -> Result<[f64; 3]> {
        let t_local = map_time(&self.schedule.segments[segment], t_global)?;
        let ray = Ray { t: t_local, ..*ray };
        let (res, _) = render_ray(&self.models[segment], &ray, &self.bounds, bg, &self.config, rng)?;
        Ok(res.color)
    }

    /// Renders a full view at a global time; pixel-center rays, per-pixel
    /// deterministic rngs derived from `seed`.
    pub fn render_view(
        &self,
        camera: &crate::sim::CameraModel,
        background: &crate::events::IntensityFrame,
        t_global: u64,
        seed: u64,
    ) -> Result<crate::events::IntensityFrame> {
        use rand::SeedableRng;
        use rayon::prelude::*;
        let (w, h) = (usize::from(camera.width), usize::from(camera.height));
        if background.width() != w || background.height() != h || background.channels() != 3 {
            return Err(Error::invalid("background shape does not match the camera"));
        }
        let rows: Vec<Vec<[f64; 3]>> = (0..h)
            .into_par_iter()
            .map(|y| -> Result<Vec<[f64; 3]>> {
                let mut row = Vec::with_capacity(w);
                for x in 0..w {
                    let ray = camera.pixel_ray(x as u16, y as u16, 0.5, 0.5, 0, 0.0);
                    let bg = [
                        background.get(x, y, 0),
                        background.get(x, y, 1),
                        background.get(x, y, 2),
                    ];
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(seed ^ ((y * w + x) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    row.push(self.render(&ray, t_global, bg, &mut rng)?);
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut frame = crate::events::IntensityFrame::zeros(w, h, 3);
        for (y, row) in rows.iter().enumerate() {
            for (x, px) in row.iter().enumerate() {
                for c in 0..3 {
                    frame.set(x, y, c, px[c].clamp(0.0, f64::MAX));
                }
            }
        }
        Ok(frame)
    }

    /// Renders one ray at a global time, cross-fading the two neighboring
    /// models inside an overlap: `(1 - a) C_i + a C_{i+1}` with `a` affine
    /// over the overlap.
    pub fn render(&self, ray: &Ray, t_global: u64, bg: [f64; 3], rng: &mut ChaCha8Rng) -> Result<[f64; 3]> {
        let covering = self.schedule.covering(t_global);
        match covering.as_slice() {
            [] => Err(Error::OutOfRange(format!("t = {t_global} not covered by any segment"))),
            [i] => self.render_with(*i, ray, t_global, bg, rng),
            [i, j, ..] => {
                let ov = self.schedule.overlap(*i).ok_or_else(|| {
                    Error::invalid(format!("segments {i} and {j} cover t but do not overlap"))
                })?;
                let alpha = (t_global - ov.t_start) as f64 / ov.length() as f64;
                if alpha == 0.0 {
                    return self.render_with(*i, ray, t_global, bg, rng);
                }
                if alpha == 1.0 {
                    return self.render_with(*j, ray, t_global, bg, rng);
                }
                let a = self.render_with(*i, ray, t_global, bg, rng)?;
                let b = self.render_with(*j, ray, t_global, bg, rng)?;
                Ok([
                    (1.0 - alpha) * a[0] + alpha * b[0],
                    (1.0 - alpha) * a[1] + alpha * b[1],
                    (1.0 - alpha) * a[2] + alpha * b[2],
                ])
            }
        }
    }
}
