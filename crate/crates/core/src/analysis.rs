//! Noise-accumulation statistics (closed forms plus a Monte Carlo
//! verification harness), camera response calibration and image quality
//! metrics.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::events::IntensityFrame;

/// Polarity distribution of i.i.d. noise events. `p_pos + p_neg = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub p_pos: f64,
    pub p_neg: f64,
}

impl NoiseParams {
    pub fn new(p_pos: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_pos) {
            return Err(Error::invalid(format!("p_pos must be in [0, 1], got {p_pos}")));
        }
        Ok(NoiseParams {
            p_pos,
            p_neg: 1.0 - p_pos,
        })
    }
}

/// Expected accumulated polarity after `n` undecayed noise events:
/// `n (p_pos - p_neg)`.
pub fn expectation_no_decay(n: u64, params: &NoiseParams) -> f64 {
    n as f64 * (params.p_pos - params.p_neg)
}

/// Variance of the accumulated polarity after `n` undecayed noise events,
/// in the closed form `n (n - 1) (p_pos - p_neg)^2 + 2 n p_neg`. Grows
/// without bound in `n`.
///
/// Note: this form expands the squared-mean term linearly, so it matches
/// the i.i.d. sample variance `n (1 - (p_pos - p_neg)^2)` exactly at
/// `p_pos = p_neg = 1/2` and upper-bounds it elsewhere.
pub fn variance_no_decay(n: u64, params: &NoiseParams) -> f64 {
    let n = n as f64;
    let d = params.p_pos - params.p_neg;
    n * (n - 1.0) * d * d + 2.0 * n * params.p_neg
}

/// Expected decayed accumulated polarity:
/// `(p_pos - p_neg) (b^n - 1) / (b - 1)`; converges to
/// `(p_pos - p_neg) / (1 - b)` as n grows.
pub fn expectation_decay(n: u64, params: &NoiseParams, b: f64) -> Result<f64> {
    check_decay(b)?;
    if b == 1.0 {
        return Ok(expectation_no_decay(n, params));
    }
    Ok((params.p_pos - params.p_neg) * geometric_sum(b, n))
}

/// Variance of the decayed accumulated polarity; stays bounded for b < 1:
///
/// `(p+ + p-) (b^2n - 1)/(b^2 - 1)
///  + 2 (p+ - p-)^2 / (b - 1) . [(b^2n - 1)/(b^2 - 1) - (b^n - 1)/(b - 1)]
///  - E^2`
pub fn variance_decay(n: u64, params: &NoiseParams, b: f64) -> Result<f64> {
    check_decay(b)?;
    if b == 1.0 {
        return Ok(variance_no_decay(n, params));
    }
    let d = params.p_pos - params.p_neg;
    let sum_b2 = geometric_sum(b * b, n);
    let sum_b = geometric_sum(b, n);
    let e = d * sum_b;
    let total = params.p_pos + params.p_neg;
    Ok(total * sum_b2 + 2.0 * d * d / (b - 1.0) * (sum_b2 - sum_b) - e * e)
}

fn check_decay(b: f64) -> Result<()> {
    if !(b > 0.0 && b <= 1.0) {
        return Err(Error::invalid(format!("decay must be in (0, 1], got {b}")));
    }
    Ok(())
}

/// `(q^n - 1) / (q - 1)` = 1 + q + ... + q^(n-1), for q != 1.
fn geometric_sum(q: f64, n: u64) -> f64 {
    (q.powi(n as i32) - 1.0) / (q - 1.0)
}

/// Empirical mean and (unbiased) variance of the decayed accumulated
/// polarity over `trials` independent simulations of `n` noise events.
/// Deterministic under a fixed seed; trials use independent seeded streams.
pub fn monte_carlo_noise(
    n: u64,
    params: &NoiseParams,
    b: f64,
    trials: u64,
    seed: u64,
) -> Result<(f64, f64)> {
    if trials < 1 {
        return Err(Error::invalid("need at least one trial"));
    }
    check_decay(b)?;
    let p_pos = params.p_pos;
    let samples: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ trial.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut s = 0.0f64;
            for _ in 0..n {
                let p = if rng.gen_bool(p_pos) { 1.0 } else { -1.0 };
                s = s * b + p;
            }
            s
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / trials as f64;
    let var = if trials == 1 {
        0.0
    } else {
        samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (trials as f64 - 1.0)
    };
    Ok((mean, var))
}

/// Linear camera response fit `value = slope * exposure + epsilon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrfFit {
    pub slope: f64,
    pub epsilon: f64,
    pub residual_rms: f64,
    pub n_used: usize,
}

/// Fraction of full scale above which samples count as saturated.
pub const CRF_SATURATION_CUTOFF: f64 = 0.98;

/// Least-squares linear fit of recorded value against exposure, excluding
/// saturated samples (value >= 0.98 full scale) and, with `outlier_clip`,
/// one pass of 3-RMS outlier rejection.
pub fn crf_fit(samples: &[(f64, f64)], full_scale: f64, outlier_clip: bool) -> Result<CrfFit> {
    let kept: Vec<(f64, f64)> = samples
        .iter()
        .copied()
        .filter(|&(_, v)| v < CRF_SATURATION_CUTOFF * full_scale)
        .collect();
    if kept.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 unsaturated samples, got {}",
            kept.len()
        )));
    }
    let first = fit_line(&kept)?;
    if !outlier_clip {
        return Ok(first);
    }
    let threshold = 3.0 * first.residual_rms;
    if threshold == 0.0 {
        return Ok(first);
    }
    let inliers: Vec<(f64, f64)> = kept
        .iter()
        .copied()
        .filter(|&(x, v)| (v - (first.slope * x + first.epsilon)).abs() <= threshold)
        .collect();
    if inliers.len() < 3 {
        return Ok(first);
    }
    fit_line(&inliers)
}

fn fit_line(samples: &[(f64, f64)]) -> Result<CrfFit> {
    let n = samples.len() as f64;
    let sx: f64 = samples.iter().map(|s| s.0).sum();
    let sy: f64 = samples.iter().map(|s| s.1).sum();
    let sxx: f64 = samples.iter().map(|s| s.0 * s.0).sum();
    let sxy: f64 = samples.iter().map(|s| s.0 * s.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 * (1.0 + sxx.abs()) {
        return Err(Error::invalid("degenerate CRF data: all exposures equal"));
    }
    let slope = (n * sxy - sx * sy) / denom;
    let epsilon = (sy - slope * sx) / n;
    let ss: f64 = samples
        .iter()
        .map(|&(x, v)| {
            let r = v - (slope * x + epsilon);
            r * r
        })
        .sum();
    Ok(CrfFit {
        slope,
        epsilon,
        residual_rms: (ss / n).sqrt(),
        n_used: samples.len(),
    })
}

/// PSNR in decibels, capped at 99 dB for MSE below 1e-12.
pub fn psnr(a: &IntensityFrame, b: &IntensityFrame, peak: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::invalid("psnr needs frames of equal shape"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse < 1e-12 {
        return Ok(99.0);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean SSIM with the standard 11x11 Gaussian window (sigma 1.5),
/// k1 = 0.01, k2 = 0.03, evaluated on the valid (fully covered) region,
/// averaged over channels.
pub fn ssim(a: &IntensityFrame, b: &IntensityFrame, peak: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::invalid("ssim needs frames of equal shape"));
    }
    const R: usize = 5; // 11x11 window
    if a.width() < 11 || a.height() < 11 {
        return Err(Error::invalid("ssim needs at least 11x11 frames"));
    }
    let kernel = gaussian_kernel_11();
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels() {
        for y in R..a.height() - R {
            for x in R..a.width() - R {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for dy in 0..11 {
                    for dx in 0..11 {
                        let w = kernel[dy] * kernel[dx];
                        let va = a.get(x + dx - R, y + dy - R, c);
                        let vb = b.get(x + dx - R, y + dy - R, c);
                        mu_a += w * va;
                        mu_b += w * vb;
                        aa += w * va * va;
                        bb += w * vb * vb;
                        ab += w * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn gaussian_kernel_11() -> [f64; 11] {
    let sigma = 1.5f64;
    let mut k = [0.0f64; 11];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(p: f64) -> NoiseParams {
        NoiseParams::new(p).unwrap()
    }

    #[test]
    fn expectation_no_decay_cases() {
        assert_eq!(expectation_no_decay(1000, &params(0.5)), 0.0);
        assert!((expectation_no_decay(100, &params(0.6)) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn variance_no_decay_special_cases() {
        let n = 137u64;
        // p+ = 1: Var = n^2 - n
        assert_eq!(variance_no_decay(n, &params(1.0)), (n * n - n) as f64);
        // p+ = p- = 1/2: Var = n
        assert!((variance_no_decay(n, &params(0.5)) - n as f64).abs() < 1e-9);
    }

    #[test]
    fn expectation_decay_cases() {
        assert_eq!(expectation_decay(50, &params(0.5), 0.93).unwrap(), 0.0);
        // p+ = 1, n = 2, b = 0.5: 1 + 0.5
        assert!((expectation_decay(2, &params(1.0), 0.5).unwrap() - 1.5).abs() < 1e-12);
        // geometric limit 1/(1 - 0.93)
        let v = expectation_decay(2000, &params(1.0), 0.93).unwrap();
        assert!((v - 1.0 / 0.07).abs() < 1e-9);
        // b = 1 delegates to the undecayed form
        assert_eq!(expectation_decay(10, &params(0.7), 1.0).unwrap(), expectation_no_decay(10, &params(0.7)));
    }

    #[test]
    fn variance_decay_cases() {
        // symmetric limit: 1 / (1 - b^2)
        let v = variance_decay(2000, &params(0.5), 0.93).unwrap();
        assert!((v - 1.0 / (1.0 - 0.8649)).abs() < 1e-9);
        assert!((v - 7.4019).abs() < 1e-4);
        // empty sum
        assert_eq!(variance_decay(0, &params(0.7), 0.93).unwrap(), 0.0);
        // b = 1 delegates
        assert_eq!(
            variance_decay(42, &params(0.6), 1.0).unwrap(),
            variance_no_decay(42, &params(0.6))
        );
    }

    #[test]
    fn variance_decay_converges() {
        for p in [0.5, 0.6, 0.9] {
            let a = variance_decay(500, &params(p), 0.93).unwrap();
            let b = variance_decay(1000, &params(p), 0.93).unwrap();
            assert!((a - b).abs() < 1e-6, "p={p}: {a} vs {b}");
        }
        let e500 = expectation_decay(500, &params(0.6), 0.93).unwrap();
        let e1000 = expectation_decay(1000, &params(0.6), 0.93).unwrap();
        assert!((e500 - e1000).abs() < 1e-6);
    }

    #[test]
    fn variance_decay_monotone_in_n_symmetric() {
        let mut prev = 0.0;
        for n in [0u64, 1, 2, 5, 10, 50, 100, 400, 1000] {
            let v = variance_decay(n, &params(0.5), 0.93).unwrap();
            assert!(v + 1e-12 >= prev, "variance must not decrease at n={n}");
            prev = v;
        }
        let limit = 1.0 / (1.0 - 0.93f64 * 0.93);
        assert!(prev <= limit + 1e-9);
    }

    #[test]
    fn monte_carlo_deterministic_cases() {
        // b = 1, p+ = 1: every trial is exactly n
        let (mean, var) = monte_carlo_noise(25, &params(1.0), 1.0, 100, 7).unwrap();
        assert_eq!(mean, 25.0);
        assert_eq!(var, 0.0);
        // fixed seed reproducibility
        let a = monte_carlo_noise(50, &params(0.6), 0.93, 2000, 42).unwrap();
        let b = monte_carlo_noise(50, &params(0.6), 0.93, 2000, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn monte_carlo_matches_closed_forms() {
        let trials = 100_000u64;
        // undecayed mean within 5 sigma of standard error
        let p = params(0.6);
        let n = 100u64;
        let (mean, _) = monte_carlo_noise(n, &p, 1.0, trials, 123).unwrap();
        let want_mean = expectation_no_decay(n, &p);
        let se = (variance_no_decay(n, &p) / trials as f64).sqrt();
        assert!((mean - want_mean).abs() < 5.0 * se, "mean {mean} vs {want_mean}");

        // undecayed variance at the symmetric point, where the closed form
        // coincides with the i.i.d. sample variance
        let p = params(0.5);
        let (_, var) = monte_carlo_noise(n, &p, 1.0, trials, 77).unwrap();
        let want_var = variance_no_decay(n, &p);
        assert!((var - want_var).abs() / want_var < 0.05, "var {var} vs {want_var}");

        // decayed, p+ = 0.7, n = 50: the decayed closed form is exact
        let p = params(0.7);
        let (mean, var) = monte_carlo_noise(50, &p, 0.93, trials, 321).unwrap();
        let want_mean = expectation_decay(50, &p, 0.93).unwrap();
        let want_var = variance_decay(50, &p, 0.93).unwrap();
        let se = (want_var / trials as f64).sqrt();
        assert!((mean - want_mean).abs() < 5.0 * se);
        assert!((var - want_var).abs() / want_var < 0.05, "var {var} vs {want_var}");

        // decayed, p+ = 0.6, n = 200
        let p = params(0.6);
        let (_, var) = monte_carlo_noise(200, &p, 0.93, trials, 555).unwrap();
        let want_var = variance_decay(200, &p, 0.93).unwrap();
        assert!((var - want_var).abs() / want_var < 0.05, "var {var} vs {want_var}");
    }

    #[test]
    fn crf_fit_exact_line() {
        let samples: Vec<(f64, f64)> = (0..20).map(|i| {
            let x = i as f64 / 25.0;
            (x, 0.8 * x + 0.03)
        }).collect();
        let fit = crf_fit(&samples, 1.0, false).unwrap();
        assert!((fit.slope - 0.8).abs() < 1e-12);
        assert!((fit.epsilon - 0.03).abs() < 1e-12);
        assert!(fit.residual_rms < 1e-12);
    }

    #[test]
    fn crf_fit_degenerate() {
        let samples = vec![(0.5, 0.1), (0.5, 0.2), (0.5, 0.3)];
        assert!(crf_fit(&samples, 1.0, false).is_err());
    }

    #[test]
    fn crf_fit_rejects_outlier() {
        let mut samples: Vec<(f64, f64)> = (0..30).map(|i| {
            let x = i as f64 / 40.0;
            (x, 0.8 * x + 0.03)
        }).collect();
        samples.push((0.5, 0.9)); // gross outlier
        let fit = crf_fit(&samples, 1.0, true).unwrap();
        assert!((fit.slope - 0.8).abs() < 1e-3, "slope {}", fit.slope);
        assert!((fit.epsilon - 0.03).abs() < 1e-3);
    }

    #[test]
    fn crf_fit_excludes_saturated() {
        let mut samples: Vec<(f64, f64)> = (0..20).map(|i| {
            let x = i as f64 / 20.0;
            (x, (0.8 * x + 0.03).min(1.0))
        }).collect();
        // saturated tail at full scale
        samples.push((2.0, 1.0));
        samples.push((3.0, 1.0));
        let fit = crf_fit(&samples, 1.0, false).unwrap();
        assert!((fit.slope - 0.8).abs() < 1e-9);
    }

    #[test]
    fn psnr_cases() {
        let a = IntensityFrame::filled(8, 8, 1, 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);
        let mut b = a.clone();
        for v in b.data_mut() {
            *v += 0.1; // MSE = 0.01 -> 20 dB
        }
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let c = IntensityFrame::filled(4, 4, 1, 0.5);
        assert!(psnr(&a, &c, 1.0).is_err());
    }

    #[test]
    fn ssim_identity_is_one() {
        let mut a = IntensityFrame::zeros(16, 16, 1);
        for (i, v) in a.data_mut().iter_mut().enumerate() {
            *v = (i % 7) as f64 / 7.0;
        }
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_ssim_match_independent_reimplementation() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = IntensityFrame::zeros(16, 12, 1);
        let mut b = IntensityFrame::zeros(16, 12, 1);
        for v in a.data_mut() {
            *v = rng.gen::<f64>();
        }
        for v in b.data_mut() {
            *v = rng.gen::<f64>();
        }

        // independent PSNR: direct formula, no shared helpers
        let mut se = 0.0;
        for i in 0..a.data().len() {
            let d = a.data()[i] - b.data()[i];
            se += d * d;
        }
        let want_psnr = 10.0 * (1.0 / (se / a.data().len() as f64)).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - want_psnr).abs() < 1e-9);

        // independent SSIM: recompute from scratch with explicit loops
        let sigma: f64 = 1.5;
        let mut kern = [0.0f64; 11];
        let mut ks = 0.0;
        for (i, v) in kern.iter_mut().enumerate() {
            *v = (-((i as f64 - 5.0) * (i as f64 - 5.0)) / (2.0 * sigma * sigma)).exp();
            ks += *v;
        }
        for v in &mut kern {
            *v /= ks;
        }
        let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
        let mut total = 0.0;
        let mut cnt = 0;
        for y in 5..12 - 5 {
            for x in 5..16 - 5 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11usize {
                    for dx in 0..11usize {
                        let w = kern[dy] * kern[dx];
                        let va = a.get(x + dx - 5, y + dy - 5, 0);
                        let vb = b.get(x + dx - 5, y + dy - 5, 0);
                        ma += w * va;
                        mb += w * vb;
                        saa += w * va * va;
                        sbb += w * vb * vb;
                        sab += w * va * vb;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * (sab - ma * mb) + c2))
                    / ((ma * ma + mb * mb + c1) * ((saa - ma * ma) + (sbb - mb * mb) + c2));
                cnt += 1;
            }
        }
        let want_ssim = total / cnt as f64;
        assert!((ssim(&a, &b, 1.0).unwrap() - want_ssim).abs() < 1e-9);
    }
}
