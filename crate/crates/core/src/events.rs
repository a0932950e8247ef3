//! Core event-camera domain types: events, streams, thresholds, intensity
//! frames, the Bayer color-filter projection and a naive accumulation scan
//! that serves as the oracle for the fast index.

use crate::accum::AccumulationImage;
use crate::error::{Error, Result};

/// A single sensor event: at time `t` (microseconds), pixel `(x, y)` got
/// brighter (`p = +1`) or darker (`p = -1`) by one threshold quantum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: i8,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: i8) -> Self {
        debug_assert!(p == 1 || p == -1);
        Event { t, x, y, p }
    }

    #[inline]
    pub fn polarity(&self) -> f64 {
        f64::from(self.p)
    }
}

/// Event generation thresholds, both strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub c_pos: f64,
    pub c_neg: f64,
}

impl Thresholds {
    pub fn new(c_pos: f64, c_neg: f64) -> Result<Self> {
        if !(c_pos > 0.0 && c_neg > 0.0) {
            return Err(Error::invalid(format!(
                "thresholds must be strictly positive, got c_pos={c_pos}, c_neg={c_neg}"
            )));
        }
        Ok(Thresholds { c_pos, c_neg })
    }

    pub fn symmetric(c: f64) -> Result<Self> {
        Self::new(c, c)
    }

    /// Threshold magnitude for an event of polarity `p`.
    #[inline]
    pub fn for_polarity(&self, p: i8) -> f64 {
        if p >= 0 {
            self.c_pos
        } else {
            self.c_neg
        }
    }
}

/// A time-sorted stream of events from one sensor.
#[derive(Debug, Clone)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    pub events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Self {
        EventStream {
            width,
            height,
            events,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn n_pixels(&self) -> usize {
        usize::from(self.width) * usize::from(self.height)
    }

    /// Sorts by (t, y, x, p). Canonical order for merged streams.
    pub fn sort(&mut self) {
        self.events.sort_by_key(|e| (e.t, e.y, e.x, e.p));
    }
}

/// One finding from [`validate_stream`], pointing at the first offending event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamIssue {
    /// events[index].t is smaller than its predecessor's timestamp
    OutOfOrder { index: usize },
    /// coordinates outside the sensor resolution
    OutOfBounds { index: usize },
    /// polarity other than -1 or +1
    BadPolarity { index: usize },
}

/// Validation report; `issue == None` means the stream is well formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamValidation {
    pub issue: Option<StreamIssue>,
}

impl StreamValidation {
    pub fn is_valid(&self) -> bool {
        self.issue.is_none()
    }
}

/// Reports the first violation of time ordering, coordinate bounds or
/// polarity domain, or success.
pub fn validate_stream(stream: &EventStream) -> StreamValidation {
    let mut prev_t = 0u64;
    for (i, e) in stream.events.iter().enumerate() {
        if e.x >= stream.width || e.y >= stream.height {
            return StreamValidation {
                issue: Some(StreamIssue::OutOfBounds { index: i }),
            };
        }
        if e.p != 1 && e.p != -1 {
            return StreamValidation {
                issue: Some(StreamIssue::BadPolarity { index: i }),
            };
        }
        if e.t < prev_t {
            return StreamValidation {
                issue: Some(StreamIssue::OutOfOrder { index: i }),
            };
        }
        prev_t = e.t;
    }
    StreamValidation { issue: None }
}

/// Dense floating-point image in linear intensity space, 1 or 3 channels,
/// row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityFrame {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl IntensityFrame {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        IntensityFrame {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("intensity values must be finite and >= 0, got {v}")));
        }
        Ok(IntensityFrame {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(value.is_finite() && value >= 0.0);
        let mut f = Self::zeros(width, height, channels);
        f.data.fill(value);
        f
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// All channel values at one pixel.
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &IntensityFrame) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

/// Color channel of the sensor mosaic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    R = 0,
    G = 1,
    B = 2,
}

/// The 2x2 color-filter mosaic. `grid[y % 2][x % 2]` is the channel a pixel
/// observes. Default RGGB with origin at (0, 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BayerPattern {
    pub grid: [[Channel; 2]; 2],
}

impl Default for BayerPattern {
    fn default() -> Self {
        BayerPattern::rggb()
    }
}

impl BayerPattern {
    pub fn rggb() -> Self {
        BayerPattern {
            grid: [[Channel::R, Channel::G], [Channel::G, Channel::B]],
        }
    }

    #[inline]
    pub fn channel_at(&self, x: usize, y: usize) -> usize {
        self.grid[y % 2][x % 2] as usize
    }
}

/// Projects an RGB image onto the sensor mosaic: output pixel (x, y) is the
/// input channel `pattern[y % 2][x % 2]` at the same coordinates.
pub fn bayer_select(image: &IntensityFrame, pattern: &BayerPattern) -> Result<IntensityFrame> {
    if image.channels() != 3 {
        return Err(Error::invalid(format!(
            "bayer_select needs a 3-channel image, got {}",
            image.channels()
        )));
    }
    let mut out = IntensityFrame::zeros(image.width(), image.height(), 1);
    for y in 0..image.height() {
        for x in 0..image.width() {
            out.set(x, y, 0, image.get(x, y, pattern.channel_at(x, y)));
        }
    }
    Ok(out)
}

/// Elementwise `ln(max(value, eps))`.
pub fn log_intensity(frame: &IntensityFrame, eps: f64) -> Result<IntensityFrame> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("log clamp eps must be > 0, got {eps}")));
    }
    let mut out = frame.clone();
    for v in out.data_mut() {
        *v = v.max(eps).ln();
    }
    Ok(out)
}

/// Clamped scalar log, the same convention as [`log_intensity`].
#[inline]
pub fn log_clamped(v: f64, eps: f64) -> f64 {
    v.max(eps).ln()
}

/// Default clamp for logarithms of intensity values.
pub const LOG_EPS: f64 = 1e-3;

/// Decayed event accumulation over the window `(t0, t1]` by direct scan.
///
/// Per pixel, events are weighted `decay^(k_last - k)` where `k` indexes
/// that pixel's in-window events in time order, so the most recent event
/// has weight 1. O(N_events); the oracle for [`crate::accum`].
pub fn naive_accumulate(
    stream: &EventStream,
    t0: u64,
    t1: u64,
    thresholds: &Thresholds,
    decay: f64,
) -> Result<AccumulationImage> {
    if t0 > t1 {
        return Err(Error::invalid(format!("window start {t0} exceeds end {t1}")));
    }
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::invalid(format!("decay must be in (0, 1], got {decay}")));
    }
    let w = usize::from(stream.width);
    let mut values = vec![0.0f64; stream.n_pixels()];
    for e in &stream.events {
        if e.t <= t0 || e.t > t1 {
            continue;
        }
        let idx = usize::from(e.y) * w + usize::from(e.x);
        // Processing a pixel's events in time order, S <- b*S + p*C yields
        // exactly the window-relative weighting with the latest event at 1.
        values[idx] = values[idx] * decay + e.polarity() * thresholds.for_polarity(e.p);
    }
    AccumulationImage::from_vec(stream.width, stream.height, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream_1px(events: &[(u64, i8)]) -> EventStream {
        EventStream::new(
            1,
            1,
            events.iter().map(|&(t, p)| Event::new(t, 0, 0, p)).collect(),
        )
    }

    #[test]
    fn bayer_rggb_uniform() {
        let mut img = IntensityFrame::zeros(2, 2, 3);
        for y in 0..2 {
            for x in 0..2 {
                img.set(x, y, 0, 0.2);
                img.set(x, y, 1, 0.5);
                img.set(x, y, 2, 0.8);
            }
        }
        let out = bayer_select(&img, &BayerPattern::rggb()).unwrap();
        assert_eq!(out.get(0, 0, 0), 0.2);
        assert_eq!(out.get(1, 0, 0), 0.5);
        assert_eq!(out.get(0, 1, 0), 0.5);
        assert_eq!(out.get(1, 1, 0), 0.8);
    }

    #[test]
    fn bayer_grayscale_identity() {
        let img = IntensityFrame::filled(3, 3, 3, 0.37);
        let out = bayer_select(&img, &BayerPattern::default()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn bayer_matches_per_pixel_oracle() {
        // 4x4 pseudo-random image; independent per-pixel channel pick.
        let mut img = IntensityFrame::zeros(4, 4, 3);
        let mut v = 0.123f64;
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    v = (v * 7.13 + 0.17).fract();
                    img.set(x, y, c, v);
                }
            }
        }
        let pattern = BayerPattern::rggb();
        let out = bayer_select(&img, &pattern).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let want = match (y % 2, x % 2) {
                    (0, 0) => img.get(x, y, 0),
                    (0, 1) | (1, 0) => img.get(x, y, 1),
                    _ => img.get(x, y, 2),
                };
                assert_eq!(out.get(x, y, 0), want, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn bayer_rejects_single_channel() {
        let img = IntensityFrame::zeros(2, 2, 1);
        assert!(bayer_select(&img, &BayerPattern::default()).is_err());
    }

    #[test]
    fn log_intensity_values() {
        let img = IntensityFrame::from_vec(3, 1, 1, vec![1.0, 0.0, std::f64::consts::E]).unwrap();
        let out = log_intensity(&img, 1e-3).unwrap();
        assert_eq!(out.get(0, 0, 0), 0.0);
        assert!((out.get(1, 0, 0) - (-6.907755)).abs() < 1e-5);
        assert!((out.get(2, 0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_intensity_rejects_bad_eps() {
        let img = IntensityFrame::zeros(1, 1, 1);
        assert!(log_intensity(&img, 0.0).is_err());
        assert!(log_intensity(&img, -1.0).is_err());
    }

    #[test]
    fn log_intensity_monotone() {
        let img = IntensityFrame::from_vec(4, 1, 1, vec![0.0, 1e-4, 0.5, 2.0]).unwrap();
        let out = log_intensity(&img, 1e-3).unwrap();
        for i in 1..4 {
            assert!(out.get(i, 0, 0) >= out.get(i - 1, 0, 0));
        }
    }

    #[test]
    fn naive_empty_stream_is_zero() {
        let s = EventStream::new(4, 4, vec![]);
        let th = Thresholds::symmetric(0.25).unwrap();
        let img = naive_accumulate(&s, 0, 100, &th, 0.93).unwrap();
        assert!(img.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn naive_single_event() {
        let s = EventStream::new(4, 4, vec![Event::new(10, 2, 1, 1)]);
        let th = Thresholds::new(0.25, 0.3).unwrap();
        let img = naive_accumulate(&s, 0, 100, &th, 0.93).unwrap();
        assert_eq!(img.get(2, 1), 0.25);
        assert_eq!(img.get(0, 0), 0.0);
    }

    #[test]
    fn naive_decay_weighting() {
        // events (+1, +1, -1), C = 1, decay 0.93: 0.93^2 + 0.93 - 1
        let s = stream_1px(&[(1, 1), (2, 1), (3, -1)]);
        let th = Thresholds::symmetric(1.0).unwrap();
        let img = naive_accumulate(&s, 0, 10, &th, 0.93).unwrap();
        assert!((img.get(0, 0) - (0.93f64.powi(2) + 0.93 - 1.0)).abs() < 1e-12);
        assert!((img.get(0, 0) - 0.7949).abs() < 1e-4);
    }

    #[test]
    fn naive_window_is_left_open_right_closed() {
        let s = stream_1px(&[(5, 1), (10, 1)]);
        let th = Thresholds::symmetric(1.0).unwrap();
        // event at exactly t0 excluded, at t1 included
        let img = naive_accumulate(&s, 5, 10, &th, 1.0).unwrap();
        assert_eq!(img.get(0, 0), 1.0);
    }

    #[test]
    fn naive_rejects_inverted_window() {
        let s = stream_1px(&[]);
        let th = Thresholds::symmetric(1.0).unwrap();
        assert!(naive_accumulate(&s, 10, 5, &th, 1.0).is_err());
    }

    #[test]
    fn naive_undecayed_is_plain_sum_and_additive() {
        let s = stream_1px(&[(1, 1), (4, -1), (6, 1), (9, 1)]);
        let th = Thresholds::new(0.25, 0.4).unwrap();
        let full = naive_accumulate(&s, 0, 10, &th, 1.0).unwrap();
        assert!((full.get(0, 0) - (0.25 - 0.4 + 0.25 + 0.25)).abs() < 1e-15);
        let a = naive_accumulate(&s, 0, 5, &th, 1.0).unwrap();
        let b = naive_accumulate(&s, 5, 10, &th, 1.0).unwrap();
        assert!((a.get(0, 0) + b.get(0, 0) - full.get(0, 0)).abs() < 1e-15);
    }

    #[test]
    fn validate_stream_cases() {
        let ok = EventStream::new(4, 4, vec![Event::new(1, 0, 0, 1), Event::new(2, 3, 3, -1)]);
        assert!(validate_stream(&ok).is_valid());

        let oob = EventStream::new(4, 4, vec![Event::new(1, 4, 0, 1)]);
        assert_eq!(
            validate_stream(&oob).issue,
            Some(StreamIssue::OutOfBounds { index: 0 })
        );

        let unsorted = EventStream::new(4, 4, vec![Event::new(5, 0, 0, 1), Event::new(3, 0, 0, 1)]);
        assert_eq!(
            validate_stream(&unsorted).issue,
            Some(StreamIssue::OutOfOrder { index: 1 })
        );

        let badp = EventStream::new(4, 4, vec![Event { t: 1, x: 0, y: 0, p: 0 }]);
        assert_eq!(
            validate_stream(&badp).issue,
            Some(StreamIssue::BadPolarity { index: 0 })
        );
    }
}
