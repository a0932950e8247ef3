//! Fast decayed event accumulation.
//!
//! Build once in O(N), then answer any window query `E(t0, t1]` without
//! rescanning the stream. Two layers:
//!
//! * per-pixel sorted timestamp arrays with rescaled prefix sums
//!   `D_j = sum_{k<=j} p_k C_k b^(-k)` kept in rebased chunks, answering
//!   single-pixel prefix queries by binary search in O(log n) — a decayed
//!   window is the rescaled difference `b^(j1-j0+1+...) . (D_j1 - D_j0)`;
//! * running-state snapshots every `stride` global events, so a full-image
//!   window query costs two snapshot copies plus a bounded replay instead
//!   of one binary search per pixel.
//!
//! Both produce the same numbers as [`crate::events::naive_accumulate`].

use crate::error::{Error, Result};
use crate::events::{validate_stream, EventStream, Thresholds};

/// Per-pixel accumulated event signal over one window, in log-intensity units.
#[derive(Debug, Clone, PartialEq)]
pub struct AccumulationImage {
    width: u16,
    height: u16,
    values: Vec<f64>,
}

impl AccumulationImage {
    pub fn zeros(width: u16, height: u16) -> Self {
        AccumulationImage {
            width,
            height,
            values: vec![0.0; usize::from(width) * usize::from(height)],
        }
    }

    pub fn from_vec(width: u16, height: u16, values: Vec<f64>) -> Result<Self> {
        if values.len() != usize::from(width) * usize::from(height) {
            return Err(Error::invalid("accumulation image size mismatch"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("accumulation image holds non-finite values"));
        }
        Ok(AccumulationImage {
            width,
            height,
            values,
        })
    }

    /// Skips the finiteness scan; for internal hot paths whose inputs are
    /// finite by construction.
    fn from_vec_trusted(width: u16, height: u16, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), usize::from(width) * usize::from(height));
        debug_assert!(values.iter().all(|v| v.is_finite()));
        AccumulationImage {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u16, y: u16) -> f64 {
        self.values[usize::from(y) * usize::from(self.width) + usize::from(x)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Pixels with a nonzero accumulated signal, the "positive ray" pool.
    pub fn nonzero_pixels(&self) -> Vec<(u16, u16)> {
        let w = usize::from(self.width);
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| ((i % w) as u16, (i / w) as u16))
            .collect()
    }
}

/// Default per-pixel rebase chunk length. `b^-k` overflows f64 near
/// k = 9700 at b = 0.93; rebasing every 4096 events keeps all stored
/// magnitudes finite with exact reconstruction.
pub const DEFAULT_CHUNK_SIZE: usize = 4096;

/// Diagnostics summary of a built index.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexStats {
    pub total_events: usize,
    pub min_pixel_events: usize,
    pub max_pixel_events: usize,
    pub mean_pixel_events: f64,
    /// Largest within-chunk rebase exponent reached by any pixel.
    pub max_chunk_exponent: usize,
    pub snapshot_count: usize,
    pub approx_memory_bytes: usize,
}

/// Immutable decayed-accumulation index over one event stream.
pub struct DecayAccumulator {
    width: u16,
    height: u16,
    decay: f64,
    thresholds: Thresholds,
    chunk_size: usize,

    // per-pixel CSR: events grouped by pixel, time-sorted within each group
    offsets: Vec<usize>,
    times: Vec<u64>,
    /// rescaled prefix sums, rebased at every chunk boundary
    dvals: Vec<f64>,

    // global order arrays for snapshot replay
    g_times: Vec<u64>,
    replay_px: Vec<u32>,
    replay_val: Vec<f64>,

    // running-state snapshots every `stride` global events
    stride: usize,
    snap_s: Vec<f64>,
    snap_cnt: CountSnapshots,
    /// timestamp of the event at each snapshot boundary, for the coarse
    /// level of the global binary search
    snap_times: Vec<u64>,

    // b^k for within-chunk exponents (len = chunk_size)
    chunk_pow: Vec<f64>,
    // b^k for window rescale factors, truncated at f64 underflow
    window_pow: Vec<f64>,
    // b^chunk_size, for walking back across chunk boundaries
    chunk_step: f64,
}

impl DecayAccumulator {
    /// Builds the index in O(N). The stream must be valid (sorted, in
    /// bounds) and `decay` in (0, 1].
    pub fn build(stream: &EventStream, thresholds: &Thresholds, decay: f64) -> Result<Self> {
        Self::build_with_chunk_size(stream, thresholds, decay, DEFAULT_CHUNK_SIZE)
    }

    /// As [`build`](Self::build) with an explicit rebase chunk length.
    /// Answers are identical for any chunk size >= 1.
    pub fn build_with_chunk_size(
        stream: &EventStream,
        thresholds: &Thresholds,
        decay: f64,
        chunk_size: usize,
    ) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::invalid(format!("decay must be in (0, 1], got {decay}")));
        }
        if chunk_size == 0 {
            return Err(Error::invalid("chunk_size must be >= 1"));
        }
        let report = validate_stream(stream);
        if let Some(issue) = report.issue {
            return Err(Error::InvalidStream(format!("{issue:?}")));
        }

        let n = stream.len();
        let n_pixels = stream.n_pixels();
        let w = usize::from(stream.width);

        let mut counts = vec![0usize; n_pixels];
        for e in &stream.events {
            counts[usize::from(e.y) * w + usize::from(e.x)] += 1;
        }
        let mut offsets = Vec::with_capacity(n_pixels + 1);
        let mut acc = 0usize;
        offsets.push(0);
        for c in &counts {
            acc += c;
            offsets.push(acc);
        }

        // snapshot every `stride` global events: replay stays short while
        // snapshot storage stays within ~24 bytes per event
        let stride = 1024.max(n_pixels / 4);
        let inv_decay = 1.0 / decay;

        let mut times = vec![0u64; n];
        let mut dvals = vec![0.0f64; n];
        let mut g_times = Vec::with_capacity(n);
        let mut replay_px = Vec::with_capacity(n);
        let mut replay_val = Vec::with_capacity(n);

        // per-pixel running state shared by the CSR fill and the snapshots
        let mut fill = vec![0usize; n_pixels]; // next local index
        let mut chunk_acc = vec![0.0f64; n_pixels]; // current chunk rescaled prefix
        let mut chunk_scale = vec![1.0f64; n_pixels]; // b^-(local exponent)
        let mut s_run = vec![0.0f64; n_pixels]; // anchored prefix state
        let mut cnt_run = vec![0u32; n_pixels];

        let n_snaps = n / stride + 1;
        let max_count = counts.iter().copied().max().unwrap_or(0);
        let mut snap_s = Vec::with_capacity(n_snaps * n_pixels);
        let mut snap_cnt = if max_count <= u16::MAX as usize {
            CountSnapshots::Narrow(Vec::with_capacity(n_snaps * n_pixels))
        } else {
            CountSnapshots::Wide(Vec::with_capacity(n_snaps * n_pixels))
        };

        for (g, e) in stream.events.iter().enumerate() {
            if g % stride == 0 {
                snap_s.extend_from_slice(&s_run);
                snap_cnt.push_row(&cnt_run);
            }
            let px = usize::from(e.y) * w + usize::from(e.x);
            let val = e.polarity() * thresholds.for_polarity(e.p);

            let k = fill[px];
            fill[px] = k + 1;
            let exp = k % chunk_size;
            if exp == 0 {
                chunk_acc[px] = 0.0;
                chunk_scale[px] = 1.0;
            }
            chunk_acc[px] += val * chunk_scale[px];
            chunk_scale[px] *= inv_decay;
            times[offsets[px] + k] = e.t;
            dvals[offsets[px] + k] = chunk_acc[px];

            s_run[px] = s_run[px] * decay + val;
            cnt_run[px] += 1;

            g_times.push(e.t);
            replay_px.push(px as u32);
            replay_val.push(val);
        }
        // closing snapshot so every g in [0, n] has one at or before it
        snap_s.extend_from_slice(&s_run);
        snap_cnt.push_row(&cnt_run);

        let chunk_pow: Vec<f64> = (0..chunk_size as i32).map(|k| decay.powi(k)).collect();
        let window_pow = build_window_pow(decay, max_count);
        let chunk_step = decay.powi(chunk_size as i32);
        let snap_times: Vec<u64> = (0..n.div_ceil(stride.max(1)))
            .map(|c| g_times[c * stride])
            .collect();

        Ok(DecayAccumulator {
            width: stream.width,
            height: stream.height,
            decay,
            thresholds: *thresholds,
            chunk_size,
            offsets,
            times,
            dvals,
            g_times,
            replay_px,
            replay_val,
            stride,
            snap_s,
            snap_cnt,
            snap_times,
            chunk_pow,
            window_pow,
            chunk_step,
        })
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn thresholds(&self) -> &Thresholds {
        &self.thresholds
    }

    pub fn len(&self) -> usize {
        self.g_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g_times.is_empty()
    }

    /// Timestamp of the first / last indexed event, if any.
    pub fn time_range(&self) -> Option<(u64, u64)> {
        Some((*self.g_times.first()?, *self.g_times.last()?))
    }

    #[inline]
    fn n_pixels(&self) -> usize {
        usize::from(self.width) * usize::from(self.height)
    }

    #[inline]
    fn pixel_index(&self, x: u16, y: u16) -> Result<usize> {
        if x >= self.width || y >= self.height {
            return Err(Error::invalid(format!(
                "pixel ({x}, {y}) outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(usize::from(y) * usize::from(self.width) + usize::from(x))
    }

    /// `b^k` window rescale factor; exact zero past f64 underflow.
    #[inline]
    fn window_factor(&self, k: usize) -> f64 {
        if self.decay == 1.0 {
            1.0
        } else if k < self.window_pow.len() {
            self.window_pow[k]
        } else {
            0.0
        }
    }

    /// Anchored prefix `S(j) = sum_{k<=j} p_k C_k b^(j-k)` for the pixel
    /// whose CSR slice is `[lo, hi)`, with `j` local. `j = none` means the
    /// empty prefix.
    fn anchored_prefix(&self, lo: usize, j: Option<usize>) -> f64 {
        let j = match j {
            Some(j) => j,
            None => return 0.0,
        };
        let m = self.chunk_size;
        let exp = j % m;
        let chunk_start = j - exp;
        let mut s = self.dvals[lo + j] * self.chunk_pow[exp];
        // Earlier chunks contribute b^(j - chunk_start_c) times their full
        // rescaled sum; the factor underflows to zero after a few chunks.
        let mut factor = self.chunk_pow[exp] * self.chunk_step;
        let mut c = chunk_start;
        while c > 0 && factor > 0.0 {
            c -= m;
            s += factor * self.dvals[lo + c + m - 1];
            factor *= self.chunk_step;
        }
        s
    }

    /// Decayed prefix value at `(x, y)` over events with timestamp
    /// strictly before `t`, anchored at the last such event.
    /// O(log n_pixel_events).
    pub fn query_prefix(&self, x: u16, y: u16, t: u64) -> Result<f64> {
        let px = self.pixel_index(x, y)?;
        let (lo, hi) = (self.offsets[px], self.offsets[px + 1]);
        let slice = &self.times[lo..hi];
        let cnt = slice.partition_point(|&ti| ti < t);
        Ok(self.anchored_prefix(lo, cnt.checked_sub(1)))
    }

    /// Per-pixel decayed accumulation over `(t0, t1]` for a single pixel.
    /// Uses the per-pixel prefix arrays; the full-image path is
    /// [`query_window`](Self::query_window).
    pub fn query_pixel_window(&self, x: u16, y: u16, t0: u64, t1: u64) -> Result<f64> {
        if t0 > t1 {
            return Err(Error::invalid(format!("window start {t0} exceeds end {t1}")));
        }
        let px = self.pixel_index(x, y)?;
        let (lo, hi) = (self.offsets[px], self.offsets[px + 1]);
        let slice = &self.times[lo..hi];
        let j_lo = slice.partition_point(|&ti| ti <= t0);
        let j_hi = slice.partition_point(|&ti| ti <= t1);
        if j_lo == j_hi {
            return Ok(0.0);
        }
        let s1 = self.anchored_prefix(lo, j_hi.checked_sub(1));
        let s0 = self.anchored_prefix(lo, j_lo.checked_sub(1));
        Ok(s1 - self.window_factor(j_hi - j_lo) * s0)
    }

    /// Global position of the first event with `t > bound`, via a coarse
    /// search over snapshot boundary times then a fine search inside one
    /// stride segment.
    fn global_upper_bound(&self, bound: u64) -> usize {
        let seg = self.snap_times.partition_point(|&ti| ti <= bound);
        let lo = seg.saturating_sub(1) * self.stride;
        let hi = (lo + self.stride).min(self.g_times.len());
        lo + self.g_times[lo..hi].partition_point(|&ti| ti <= bound)
    }

    /// Snapshot index and replay range covering global position `g`.
    fn replay_range(&self, g: usize) -> (usize, std::ops::Range<usize>) {
        let n_snaps = self.snap_s.len() / self.n_pixels().max(1);
        let c = (g / self.stride).min(n_snaps.saturating_sub(1));
        (c, c * self.stride..g)
    }

    /// Writes the anchored prefix state right after the first `g` global
    /// events into `s`: sequential copy of the nearest snapshot row plus a
    /// bounded in-cache replay. When given, `dcnt` accumulates each
    /// replayed event's pixel count with weight `cnt_sign`.
    fn state_at(&self, g: usize, s: &mut Vec<f64>, dcnt: Option<(&mut [i32], i32)>) {
        let n_pixels = self.n_pixels();
        let (c, range) = self.replay_range(g);
        s.clear();
        s.extend_from_slice(&self.snap_s[c * n_pixels..(c + 1) * n_pixels]);
        let b = self.decay;
        let px_slice = &self.replay_px[range.clone()];
        let val_slice = &self.replay_val[range];
        match (b == 1.0, dcnt) {
            (true, None) => {
                for (&px, &val) in px_slice.iter().zip(val_slice) {
                    s[px as usize] += val;
                }
            }
            (false, Some((dcnt, sign))) => {
                for (&px, &val) in px_slice.iter().zip(val_slice) {
                    let px = px as usize;
                    s[px] = s[px] * b + val;
                    dcnt[px] += sign;
                }
            }
            (true, Some((dcnt, sign))) => {
                for (&px, &val) in px_slice.iter().zip(val_slice) {
                    let px = px as usize;
                    s[px] += val;
                    dcnt[px] += sign;
                }
            }
            (false, None) => {
                for (&px, &val) in px_slice.iter().zip(val_slice) {
                    let px = px as usize;
                    s[px] = s[px] * b + val;
                }
            }
        }
    }

    /// Full-image decayed accumulation over `(t0, t1]`, matching
    /// [`crate::events::naive_accumulate`] within 1e-9 relative.
    pub fn query_window(&self, t0: u64, t1: u64) -> Result<AccumulationImage> {
        if t0 > t1 {
            return Err(Error::invalid(format!("window start {t0} exceeds end {t1}")));
        }
        let g0 = self.global_upper_bound(t0);
        let g1 = self.global_upper_bound(t1);
        let n_pixels = self.n_pixels();
        let undecayed = self.decay == 1.0;

        QUERY_SCRATCH.with(|scratch| {
            let mut scratch = scratch.borrow_mut();
            let Scratch { s0, dcnt } = &mut *scratch;
            let mut s1 = Vec::with_capacity(n_pixels);
            if undecayed {
                self.state_at(g0, s0, None);
                self.state_at(g1, &mut s1, None);
                for (out, &prev) in s1.iter_mut().zip(s0.iter()) {
                    *out -= prev;
                }
            } else {
                // per-pixel window count = (snapshot row difference) +
                // (replay count delta); rows are streamed, not copied
                dcnt.clear();
                dcnt.resize(n_pixels, 0);
                let (snap0, _) = self.replay_range(g0);
                let (snap1, _) = self.replay_range(g1);
                self.state_at(g0, s0, Some((dcnt, -1)));
                self.state_at(g1, &mut s1, Some((dcnt, 1)));
                let pow = &self.window_pow[..];
                let max_idx = pow.len() - 1;
                let (r0, r1) = (snap0 * n_pixels, snap1 * n_pixels);
                match &self.snap_cnt {
                    CountSnapshots::Narrow(c) => {
                        let c0_row = &c[r0..r0 + n_pixels];
                        let c1_row = &c[r1..r1 + n_pixels];
                        for px in 0..n_pixels {
                            let d = (c1_row[px] as i64 - c0_row[px] as i64 + dcnt[px] as i64) as usize;
                            s1[px] -= pow[d.min(max_idx)] * s0[px];
                        }
                    }
                    CountSnapshots::Wide(c) => {
                        let c0_row = &c[r0..r0 + n_pixels];
                        let c1_row = &c[r1..r1 + n_pixels];
                        for px in 0..n_pixels {
                            let d = (c1_row[px] as i64 - c0_row[px] as i64 + dcnt[px] as i64) as usize;
                            s1[px] -= pow[d.min(max_idx)] * s0[px];
                        }
                    }
                }
            }
            Ok(AccumulationImage::from_vec_trusted(self.width, self.height, s1))
        })
    }

    /// Time-ordered `(t, signed quantum)` pairs for one pixel's events in
    /// `(t0, t1]`. The quantum is `p * C_p`.
    pub fn pixel_event_quanta(
        &self,
        x: u16,
        y: u16,
        t0: u64,
        t1: u64,
    ) -> Result<impl Iterator<Item = (u64, f64)> + '_> {
        let px = self.pixel_index(x, y)?;
        let (lo, hi) = (self.offsets[px], self.offsets[px + 1]);
        let slice = &self.times[lo..hi];
        let j_lo = slice.partition_point(|&ti| ti <= t0);
        let j_hi = slice.partition_point(|&ti| ti <= t1);
        let m = self.chunk_size;
        let th = self.thresholds;
        let dvals = &self.dvals[lo..hi];
        let times = &self.times[lo..hi];
        Ok((j_lo..j_hi).map(move |k| {
            // recover the polarity from the chunk-local prefix difference
            let diff = if k % m == 0 { dvals[k] } else { dvals[k] - dvals[k - 1] };
            let q = if diff > 0.0 { th.c_pos } else { -th.c_neg };
            (times[k], q)
        }))
    }

    pub fn stats(&self) -> IndexStats {
        let n_pixels = self.n_pixels();
        let mut min = usize::MAX;
        let mut max = 0usize;
        for px in 0..n_pixels {
            let c = self.offsets[px + 1] - self.offsets[px];
            min = min.min(c);
            max = max.max(c);
        }
        if n_pixels == 0 {
            min = 0;
        }
        let total = self.times.len();
        let max_chunk_exponent = if max == 0 { 0 } else { (max - 1).min(self.chunk_size - 1) };
        let approx_memory_bytes = self.offsets.len() * 8
            + self.times.len() * 8
            + self.dvals.len() * 8
            + self.g_times.len() * 8
            + self.replay_px.len() * 4
            + self.replay_val.len() * 8
            + self.snap_s.len() * 8
            + self.snap_cnt.bytes()
            + (self.chunk_pow.len() + self.window_pow.len()) * 8;
        IndexStats {
            total_events: total,
            min_pixel_events: min,
            max_pixel_events: max,
            mean_pixel_events: if n_pixels == 0 { 0.0 } else { total as f64 / n_pixels as f64 },
            max_chunk_exponent,
            snapshot_count: self.snap_s.len() / n_pixels.max(1),
            approx_memory_bytes,
        }
    }
}

/// Per-pixel count snapshots; u16 when every pixel's total stays within
/// range, halving the bytes a decayed query has to stream.
enum CountSnapshots {
    Narrow(Vec<u16>),
    Wide(Vec<u32>),
}

impl CountSnapshots {
    fn push_row(&mut self, row: &[u32]) {
        match self {
            CountSnapshots::Narrow(v) => v.extend(row.iter().map(|&c| c as u16)),
            CountSnapshots::Wide(v) => v.extend_from_slice(row),
        }
    }

    fn bytes(&self) -> usize {
        match self {
            CountSnapshots::Narrow(v) => v.len() * 2,
            CountSnapshots::Wide(v) => v.len() * 4,
        }
    }
}

/// Per-thread replay workspace, reused across queries.
#[derive(Default)]
struct Scratch {
    s0: Vec<f64>,
    /// per-pixel (side-1 count - side-0 count) replay increments
    dcnt: Vec<i32>,
}

thread_local! {
    static QUERY_SCRATCH: std::cell::RefCell<Scratch> = std::cell::RefCell::new(Scratch::default());
}

/// `b^k` for k in 0..=max_count, flushed to exact zero past f64 underflow
/// so window rescale factors are a plain table lookup.
fn build_window_pow(decay: f64, max_count: usize) -> Vec<f64> {
    if decay == 1.0 {
        return vec![1.0];
    }
    let mut pow = Vec::with_capacity(max_count + 1);
    let mut v = 1.0f64;
    for k in 0..=max_count {
        pow.push(v);
        if v > 0.0 {
            v = decay.powi(k as i32 + 1);
        }
    }
    pow
}
