//! Sin/cos positional encoding with coarse-to-fine frequency annealing.
//!
//! Spatial coordinates, time and view direction each get their own band
//! count; one shared anneal parameter windows the bands of every group.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingConfig {
    pub n_spatial_freqs: usize,
    pub n_temporal_freqs: usize,
    pub n_dir_freqs: usize,
    pub include_identity: bool,
    /// current anneal position in frequency-band units; bands at or above
    /// it are windowed down to zero
    pub anneal_alpha: f64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            n_spatial_freqs: 14,
            n_temporal_freqs: 7,
            n_dir_freqs: 4,
            include_identity: true,
            anneal_alpha: f64::INFINITY,
        }
    }
}

impl EncodingConfig {
    /// Output length of [`positional_encode`] for an input of `dim`
    /// components and `freqs` bands per component.
    pub fn encoded_len(&self, dim: usize, freqs: usize) -> usize {
        let identity = if self.include_identity { dim } else { 0 };
        identity + dim * 2 * freqs
    }

    pub fn spatial_len(&self) -> usize {
        self.encoded_len(3, self.n_spatial_freqs)
    }

    pub fn temporal_len(&self) -> usize {
        self.encoded_len(1, self.n_temporal_freqs)
    }

    pub fn dir_len(&self) -> usize {
        self.encoded_len(3, self.n_dir_freqs)
    }

    /// Fully annealed copy (all bands on).
    pub fn with_alpha(&self, alpha: f64) -> Self {
        EncodingConfig {
            anneal_alpha: alpha,
            ..*self
        }
    }
}

/// Cosine-ramp window for band `k` at anneal position `alpha`:
/// `(1 - cos(pi clamp(alpha - k, 0, 1))) / 2`.
#[inline]
pub fn anneal_window(alpha: f64, k: usize) -> f64 {
    let x = (alpha - k as f64).clamp(0.0, 1.0);
    (1.0 - (std::f64::consts::PI * x).cos()) / 2.0
}

/// Encodes `v` as `[v; sin(2^k pi v) w_k; cos(2^k pi v) w_k]` for
/// `k < freqs`, appending to `out`. Band weights come from the config's
/// anneal position.
pub fn positional_encode(v: &[f64], config: &EncodingConfig, freqs: usize, out: &mut Vec<f64>) {
    if config.include_identity {
        out.extend_from_slice(v);
    }
    for k in 0..freqs {
        let w = anneal_window(config.anneal_alpha, k);
        let scale = (1u64 << k) as f64 * std::f64::consts::PI;
        for &x in v {
            let (s, c) = (scale * x).sin_cos();
            out.push(s * w);
            out.push(c * w);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode(v: &[f64], alpha: f64, freqs: usize) -> Vec<f64> {
        let cfg = EncodingConfig::default().with_alpha(alpha);
        let mut out = Vec::new();
        positional_encode(v, &cfg, freqs, &mut out);
        out
    }

    #[test]
    fn zero_input_full_alpha() {
        let out = encode(&[0.0], f64::INFINITY, 3);
        assert_eq!(out.len(), 1 + 2 * 3);
        assert_eq!(out[0], 0.0);
        for k in 0..3 {
            assert_eq!(out[1 + 2 * k], 0.0, "sin band {k}");
            assert_eq!(out[2 + 2 * k], 1.0, "cos band {k}");
        }
    }

    #[test]
    fn alpha_zero_keeps_only_identity() {
        let out = encode(&[0.7, -0.3], 0.0, 4);
        assert_eq!(out[0], 0.7);
        assert_eq!(out[1], -0.3);
        assert!(out[2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alpha_one_and_a_half_window_weights() {
        assert_eq!(anneal_window(1.5, 0), 1.0);
        assert!((anneal_window(1.5, 1) - 0.5).abs() < 1e-12);
        assert_eq!(anneal_window(1.5, 2), 0.0);

        // weights show up multiplicatively in the bands
        let v = 0.31f64;
        let out = encode(&[v], 1.5, 3);
        let s0 = (std::f64::consts::PI * v).sin();
        let s1 = (2.0 * std::f64::consts::PI * v).sin();
        assert!((out[1] - s0).abs() < 1e-12);
        assert!((out[3] - 0.5 * s1).abs() < 1e-12);
        assert_eq!(out[5], 0.0);
    }

    #[test]
    fn window_is_monotone_in_alpha() {
        for k in 0..14 {
            let mut prev = -1.0;
            let mut a = 0.0;
            while a <= 15.0 {
                let w = anneal_window(a, k);
                assert!(w + 1e-15 >= prev, "band {k} alpha {a}");
                assert!((0.0..=1.0).contains(&w));
                prev = w;
                a += 0.125;
            }
        }
    }

    #[test]
    fn encoded_lengths() {
        let cfg = EncodingConfig::default();
        assert_eq!(cfg.spatial_len(), 3 + 3 * 2 * 14);
        assert_eq!(cfg.temporal_len(), 1 + 2 * 7);
        assert_eq!(cfg.dir_len(), 3 + 3 * 2 * 4);
    }
}
