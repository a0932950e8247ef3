//! ESI frame synthesis and EDI deblurring: recover sharp frames from a
//! blurry exposure plus events, and synthesize instantaneous frames at
//! arbitrary times. All queries go through the fast accumulation index.

use crate::accum::DecayAccumulator;
use crate::error::{Error, Result};
use crate::events::{BayerPattern, IntensityFrame};

/// One camera exposure `[t_start, t_end]` in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExposureWindow {
    pub t_start: u64,
    pub t_end: u64,
}

impl ExposureWindow {
    pub fn new(t_start: u64, t_end: u64) -> Result<Self> {
        if t_end <= t_start {
            return Err(Error::invalid(format!(
                "exposure needs t_end > t_start, got [{t_start}, {t_end}]"
            )));
        }
        Ok(ExposureWindow { t_start, t_end })
    }

    pub fn duration(&self) -> u64 {
        self.t_end - self.t_start
    }
}

fn require_exact_index(index: &DecayAccumulator) -> Result<()> {
    if index.decay() != 1.0 {
        return Err(Error::invalid(format!(
            "ESI/EDI need an undecayed index (decay = 1), got {}",
            index.decay()
        )));
    }
    Ok(())
}

fn require_mono(frame: &IntensityFrame, what: &str) -> Result<()> {
    if frame.channels() != 1 {
        return Err(Error::invalid(format!("{what} must be single-channel (mosaiced)")));
    }
    Ok(())
}

/// Shifts a reference frame to time `t` through events:
/// `I(t) = I(ref_time) * exp(E(ref_time, t))` per pixel.
pub fn esi_synthesize(
    ref_frame: &IntensityFrame,
    ref_time: u64,
    index: &DecayAccumulator,
    t: u64,
) -> Result<IntensityFrame> {
    require_exact_index(index)?;
    require_mono(ref_frame, "ESI reference frame")?;
    if ref_frame.width() != usize::from(index.width()) || ref_frame.height() != usize::from(index.height())
    {
        return Err(Error::invalid("frame and index resolutions differ"));
    }
    // one full-image query per direction; exact for decay = 1
    let acc = if t >= ref_time {
        index.query_window(ref_time, t)?
    } else {
        index.query_window(t, ref_time)?
    };
    let sign = if t >= ref_time { 1.0 } else { -1.0 };
    let mut out = ref_frame.clone();
    for y in 0..out.height() {
        for x in 0..out.width() {
            let e = sign * acc.get(x as u16, y as u16);
            let v = ref_frame.get(x, y, 0) * e.exp();
            out.set(x, y, 0, v);
        }
    }
    Ok(out)
}

/// `integral of exp(E(t_start, tau)) d tau` over the exposure, evaluated
/// exactly: the integrand is constant between event timestamps.
fn exp_integral_exact(index: &DecayAccumulator, x: u16, y: u16, window: &ExposureWindow) -> Result<f64> {
    let mut integral = 0.0f64;
    let mut level = 0.0f64;
    let mut prev_t = window.t_start;
    for (t_ev, quantum) in index.pixel_event_quanta(x, y, window.t_start, window.t_end)? {
        integral += level.exp() * (t_ev - prev_t) as f64;
        level += quantum;
        prev_t = t_ev;
    }
    integral += level.exp() * (window.t_end - prev_t) as f64;
    Ok(integral)
}

/// Recovers the instantaneous start-of-exposure frame from a blurry frame:
/// `I(t_start) = B * T / integral of exp(E(t_start, tau)) d tau`.
///
/// The integral is evaluated exactly between event timestamps; `n_quad`
/// (>= 2) is the resolution used by the quadrature cross-check
/// [`edi_deblur_quadrature`].
pub fn edi_deblur(
    blurry: &IntensityFrame,
    window: &ExposureWindow,
    index: &DecayAccumulator,
    n_quad: usize,
) -> Result<IntensityFrame> {
    require_exact_index(index)?;
    require_mono(blurry, "blurry frame")?;
    if n_quad < 2 {
        return Err(Error::invalid("n_quad must be >= 2"));
    }
    let t_total = window.duration() as f64;
    let mut out = blurry.clone();
    for y in 0..out.height() {
        for x in 0..out.width() {
            let integral = exp_integral_exact(index, x as u16, y as u16, window)?;
            out.set(x, y, 0, blurry.get(x, y, 0) * t_total / integral);
        }
    }
    Ok(out)
}

/// Midpoint-quadrature variant of [`edi_deblur`] used to validate the exact
/// piecewise integration.
pub fn edi_deblur_quadrature(
    blurry: &IntensityFrame,
    window: &ExposureWindow,
    index: &DecayAccumulator,
    n_quad: usize,
) -> Result<IntensityFrame> {
    require_exact_index(index)?;
    require_mono(blurry, "blurry frame")?;
    if n_quad < 2 {
        return Err(Error::invalid("n_quad must be >= 2"));
    }
    let t_total = window.duration() as f64;
    let step = t_total / n_quad as f64;
    let mut out = blurry.clone();
    for y in 0..out.height() {
        for x in 0..out.width() {
            let mut integral = 0.0;
            for q in 0..n_quad {
                let tau = window.t_start as f64 + (q as f64 + 0.5) * step;
                let e = index.query_pixel_window(x as u16, y as u16, window.t_start, tau.round() as u64)?;
                integral += e.exp() * step;
            }
            out.set(x, y, 0, blurry.get(x, y, 0) * t_total / integral);
        }
    }
    Ok(out)
}

/// Forward blur: averages the ESI-shifted sharp frame over the exposure,
/// `B = I(t_start) * (1/T) integral exp(E(t_start, tau)) d tau`.
pub fn edi_reblur(
    sharp: &IntensityFrame,
    window: &ExposureWindow,
    index: &DecayAccumulator,
) -> Result<IntensityFrame> {
    require_exact_index(index)?;
    require_mono(sharp, "sharp frame")?;
    let t_total = window.duration() as f64;
    let mut out = sharp.clone();
    for y in 0..out.height() {
        for x in 0..out.width() {
            let integral = exp_integral_exact(index, x as u16, y as u16, window)?;
            out.set(x, y, 0, sharp.get(x, y, 0) * integral / t_total);
        }
    }
    Ok(out)
}

/// Deblurs each exposure and ESI-shifts the recovered frame to the
/// requested reference timestamps, using the nearest exposure for each.
pub fn synthesize_reference_frames(
    blurry_frames: &[IntensityFrame],
    windows: &[ExposureWindow],
    index: &DecayAccumulator,
    ref_times: &[u64],
) -> Result<Vec<IntensityFrame>> {
    require_exact_index(index)?;
    if blurry_frames.len() != windows.len() || blurry_frames.is_empty() {
        return Err(Error::invalid("need one exposure window per blurry frame"));
    }
    let coverage_lo = windows.iter().map(|w| w.t_start).min().unwrap();
    let mut coverage_hi = windows.iter().map(|w| w.t_end).max().unwrap();
    if let Some((_, last_event)) = index.time_range() {
        coverage_hi = coverage_hi.max(last_event);
    }

    let mut deblurred: Vec<Option<IntensityFrame>> = vec![None; blurry_frames.len()];
    let mut out = Vec::with_capacity(ref_times.len());
    for &t in ref_times {
        if t < coverage_lo || t > coverage_hi {
            return Err(Error::OutOfRange(format!(
                "reference time {t} outside event/exposure coverage [{coverage_lo}, {coverage_hi}]"
            )));
        }
        let nearest = windows
            .iter()
            .enumerate()
            .min_by_key(|(_, w)| w.t_start.abs_diff(t))
            .map(|(i, _)| i)
            .unwrap();
        if deblurred[nearest].is_none() {
            deblurred[nearest] = Some(edi_deblur(&blurry_frames[nearest], &windows[nearest], index, 8)?);
        }
        let sharp = deblurred[nearest].as_ref().unwrap();
        out.push(esi_synthesize(sharp, windows[nearest].t_start, index, t)?);
    }
    Ok(out)
}

/// Nearest-neighbor demosaicing of a mosaiced frame: each output channel
/// takes the value of the nearest pixel observing that channel inside the
/// pixel's aligned 2x2 block.
pub fn demosaic_nearest(mosaic: &IntensityFrame, pattern: &BayerPattern) -> Result<IntensityFrame> {
    require_mono(mosaic, "mosaic")?;
    let (w, h) = (mosaic.width(), mosaic.height());
    let mut out = IntensityFrame::zeros(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let bx = (x & !1).min(w.saturating_sub(2));
            let by = (y & !1).min(h.saturating_sub(2));
            for c in 0..3 {
                // candidates in the block that observe channel c, nearest first
                let mut best = None;
                let mut best_d = usize::MAX;
                for dy in 0..2.min(h - by) {
                    for dx in 0..2.min(w - bx) {
                        let (px, py) = (bx + dx, by + dy);
                        if pattern.channel_at(px, py) == c {
                            let d = px.abs_diff(x) + py.abs_diff(y);
                            if d < best_d {
                                best_d = d;
                                best = Some(mosaic.get(px, py, 0));
                            }
                        }
                    }
                }
                out.set(x, y, c, best.unwrap_or_else(|| mosaic.get(x, y, 0)));
            }
        }
    }
    Ok(out)
}
