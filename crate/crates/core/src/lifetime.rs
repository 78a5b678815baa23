//! Per-pixel mono-exponential lifetime estimation from a datacube.
//!
//! The instrument response is taken to be a delta at the peak bin, so the
//! decay past the peak is fit directly (tail fitting) instead of deconvolving.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Datacube, Plane, Role};

/// Floor applied to background-subtracted counts before taking logs.
const LOG_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// Weighted least squares of `ln(counts)` against time over the tail.
    LogLinearTail,
    /// First moment of the tail relative to the peak.
    CenterOfMass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub method: FitMethod,
    /// Bins after the peak where the tail window starts.
    pub tail_start: usize,
    /// Pixels with fewer total photons are left unsampled.
    pub min_counts: f64,
    /// Constant dark counts per bin. `None` uses the mean of the bins before the
    /// rising edge.
    pub background: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            method: FitMethod::LogLinearTail,
            tail_start: 0,
            min_counts: 50.0,
            background: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_counts >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "min_counts must be >= 1, got {}",
                self.min_counts
            )));
        }
        if let Some(bg) = self.background {
            if !(bg.is_finite() && bg >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "background must be >= 0, got {bg}"
                )));
            }
        }
        Ok(())
    }
}

/// Fits a lifetime (ns) per pixel. Pixels that cannot be fit are `NaN`.
pub fn fit_lifetime(cube: &Datacube, cfg: &FitConfig) -> Result<Plane> {
    cfg.validate()?;
    let (rows, cols, _) = cube.shape();
    let counts = cube.counts();
    let mut out = Array2::from_elem((rows, cols), f64::NAN);
    for r in 0..rows {
        for c in 0..cols {
            let decay = counts.slice(ndarray::s![r, c, ..]);
            if let Some(tau) = fit_decay(decay, cube.bin_width(), cfg) {
                out[[r, c]] = tau;
            }
        }
    }
    Plane::new(out, Role::Lifetime, "ns")
}

/// Fits one histogram; `None` marks the pixel unsampled.
pub fn fit_decay(decay: ArrayView1<'_, f64>, bin_width: f64, cfg: &FitConfig) -> Option<f64> {
    let total: f64 = decay.sum();
    if total < cfg.min_counts {
        return None;
    }
    let peak = argmax(decay);
    let background = cfg.background.unwrap_or_else(|| baseline(decay, peak));
    let start = peak + cfg.tail_start;
    // end of the contiguous run above background; sparse late bins holding
    // isolated single counts would bias the log slope
    let end = match decay.iter().skip(peak).position(|&v| v <= background) {
        Some(0) => return None,
        Some(k) => peak + k - 1,
        None => decay.len() - 1,
    };
    if start > end {
        return None;
    }
    let tail = (start..=end).map(|t| (t, (decay[t] - background).max(0.0)));
    let tau = match cfg.method {
        FitMethod::LogLinearTail => {
            let slope = weighted_log_slope(tail)?;
            if !(slope < 0.0) {
                return None;
            }
            -bin_width / slope
        }
        FitMethod::CenterOfMass => {
            let (mut num, mut den) = (0.0, 0.0);
            for (t, c) in tail {
                // bin centre relative to the start of the peak bin
                num += ((t - peak) as f64 + 0.5) * bin_width * c;
                den += c;
            }
            if den <= 0.0 {
                return None;
            }
            num / den
        }
    };
    tau.is_finite().then_some(tau)
}

/// Mean of the bins before the rising edge, i.e. before the first bin that
/// reaches half the peak. Decays that start in bin 0 have no baseline.
fn baseline(decay: ArrayView1<'_, f64>, peak: usize) -> f64 {
    let half = 0.5 * decay[peak];
    let rise = decay.iter().position(|&v| v >= half).unwrap_or(0);
    if rise == 0 {
        0.0
    } else {
        decay.slice(ndarray::s![..rise]).mean().unwrap_or(0.0)
    }
}

fn argmax(v: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Slope of `ln(c)` against `t` by least squares weighted with the counts.
fn weighted_log_slope(points: impl Iterator<Item = (usize, f64)>) -> Option<f64> {
    let (mut sw, mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut n = 0;
    for (t, c) in points {
        let c = c.max(LOG_FLOOR);
        let (t, y) = (t as f64, c.ln());
        sw += c;
        st += c * t;
        sy += c * y;
        stt += c * t * t;
        sty += c * t * y;
        n += 1;
    }
    if n < 2 {
        return None;
    }
    let denom = sw * stt - st * st;
    if denom <= 0.0 {
        return None;
    }
    Some((sw * sty - st * sy) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    fn pure_decay(amplitude: f64, tau: f64, bw: f64, bins: usize) -> Array1<f64> {
        Array1::from_iter((0..bins).map(|t| amplitude * (-(t as f64) * bw / tau).exp()))
    }

    fn cube_of(decay: &Array1<f64>, bw: f64) -> Datacube {
        let counts = Array3::from_shape_fn((1, 1, decay.len()), |(_, _, t)| decay[t]);
        Datacube::new(counts, bw, None).unwrap()
    }

    #[test]
    fn log_linear_exact_on_noiseless_exponential() {
        let decay = pure_decay(1000.0, 2.0, 0.1, 200);
        let tau = fit_lifetime(&cube_of(&decay, 0.1), &FitConfig::default()).unwrap();
        let got = tau.values()[[0, 0]];
        assert!(((got - 2.0) / 2.0).abs() < 1e-6, "{got}");
    }

    #[test]
    fn empty_pixel_is_unsampled() {
        let cube = Datacube::new(Array3::zeros((1, 1, 64)), 0.1, None).unwrap();
        for method in [FitMethod::LogLinearTail, FitMethod::CenterOfMass] {
            let cfg = FitConfig {
                method,
                ..FitConfig::default()
            };
            assert!(fit_lifetime(&cube, &cfg).unwrap().values()[[0, 0]].is_nan());
        }
    }

    #[test]
    fn growing_tail_is_unsampled() {
        let decay = Array1::from_iter((0..32).map(|t| 10.0 + t as f64));
        let cfg = FitConfig {
            tail_start: 0,
            background: Some(0.0),
            ..FitConfig::default()
        };
        // peak is the last bin, so the window holds one point
        assert!(fit_decay(decay.view(), 0.1, &cfg).is_none());
        let cfg = FitConfig {
            tail_start: 40,
            ..cfg
        };
        assert!(fit_decay(pure_decay(100.0, 1.0, 0.1, 32).view(), 0.1, &cfg).is_none());
    }

    #[test]
    fn background_defaults_to_pre_peak_mean() {
        let mut decay = pure_decay(500.0, 1.5, 0.05, 300);
        let shifted: Vec<f64> = std::iter::repeat(0.0)
            .take(20)
            .chain(decay.iter().copied())
            .collect();
        decay = Array1::from(shifted) + 4.0;
        let tau = fit_decay(decay.view(), 0.05, &FitConfig::default()).unwrap();
        assert!((tau - 1.5).abs() / 1.5 < 1e-6, "{tau}");
    }

    /// Negative multinomial log-likelihood of the binned decay, maximised by
    /// brute force over a lifetime grid.
    fn mle_grid(counts: &Array1<f64>, bw: f64) -> f64 {
        let bins = counts.len() as f64;
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut tau = 0.1;
        while tau <= 10.0 + 1e-12 {
            let norm = 1.0 - (-bins * bw / tau).exp();
            let ll: f64 = counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0.0)
                .map(|(t, &c)| {
                    let p = ((-(t as f64) * bw / tau).exp() - (-((t + 1) as f64) * bw / tau).exp())
                        / norm;
                    c * p.ln()
                })
                .sum();
            if ll > best.0 {
                best = (ll, tau);
            }
            tau += 0.001;
        }
        best.1
    }

    #[test]
    fn poisson_decay_agrees_with_mle_oracle() {
        let (tau, bw, bins, photons) = (2.5, 0.05, 400usize, 1e4);
        let norm = 1.0 - (-(bins as f64) * bw / tau).exp();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let counts = Array1::from_iter((0..bins).map(|t| {
            let p = ((-(t as f64) * bw / tau).exp() - (-((t + 1) as f64) * bw / tau).exp()) / norm;
            Poisson::new(photons * p).unwrap().sample(&mut rng)
        }));
        let fitted = fit_decay(counts.view(), bw, &FitConfig::default()).unwrap();
        let mle = mle_grid(&counts, bw);
        assert!((fitted - tau).abs() / tau < 0.03, "fit {fitted}");
        assert!((mle - tau).abs() / tau < 0.03, "mle {mle}");
        assert!(
            (fitted - mle).abs() / mle < 0.03,
            "fit {fitted} vs mle {mle}"
        );
    }

    #[test]
    fn center_of_mass_is_scale_invariant() {
        let decay = pure_decay(37.0, 1.2, 0.1, 120).mapv(f64::round);
        let cfg = FitConfig {
            method: FitMethod::CenterOfMass,
            background: Some(0.0),
            ..FitConfig::default()
        };
        let base = fit_decay(decay.view(), 0.1, &cfg).unwrap();
        for k in [2.0, 3.0, 17.0] {
            let scaled = fit_decay((&decay * k).view(), 0.1, &cfg).unwrap();
            assert!(
                (scaled - base).abs() <= 1e-12 * base,
                "{k}: {scaled} vs {base}"
            );
        }
    }

    #[test]
    fn fitted_lifetime_is_monotone_in_true_lifetime() {
        let cfg = FitConfig::default();
        let com = FitConfig {
            method: FitMethod::CenterOfMass,
            ..cfg
        };
        let mut prev = (0.0, 0.0);
        for k in 1..=20 {
            let tau = 0.25 * k as f64;
            let decay = pure_decay(1e4, tau, 0.05, 1000);
            let ll = fit_decay(decay.view(), 0.05, &cfg).unwrap();
            let cm = fit_decay(decay.view(), 0.05, &com).unwrap();
            assert!(ll > prev.0 && cm > prev.1);
            prev = (ll, cm);
        }
    }

    #[test]
    fn methods_agree_with_five_lifetime_window() {
        let com = FitConfig {
            method: FitMethod::CenterOfMass,
            ..FitConfig::default()
        };
        for tau in [0.5, 1.0, 2.0, 3.0] {
            let bw: f64 = 0.05;
            // window of exactly five lifetimes
            let bins = (5.0 * tau / bw).round() as usize;
            let decay = pure_decay(1e4, tau, bw, bins);
            let ll = fit_decay(decay.view(), bw, &FitConfig::default()).unwrap();
            let cm = fit_decay(decay.view(), bw, &com).unwrap();
            assert!((ll - cm).abs() / ll < 0.05, "tau {tau}: {ll} vs {cm}");
        }
    }
}
