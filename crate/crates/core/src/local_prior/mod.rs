//! Local prior: sliding-window intensity-to-lifetime regression.
//!
//! For every LR sample a window of neighbouring samples is gathered, a 1-D map
//! from HR intensity (read at the sample positions) to lifetime is fitted, and
//! that map is evaluated on the HR intensity pixels of the sample's block.

mod fit1d;

pub use fit1d::{fit_window, prepare_samples, Degenerate, LocalFunction, WindowFunction};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::types::{Plane, Role, SamplingMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalPriorConfig {
    /// Samples per window side.
    pub window: usize,
    pub function: LocalFunction,
    /// Optional output clamp `(tau_min, tau_max)` in ns.
    pub clamp_range: Option<(f64, f64)>,
}

impl Default for LocalPriorConfig {
    fn default() -> Self {
        LocalPriorConfig {
            window: 5,
            function: LocalFunction::Linear,
            clamp_range: None,
        }
    }
}

impl LocalPriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::InvalidConfig(format!(
                "local prior window must be >= 2, got {}",
                self.window
            )));
        }
        if let Some((lo, hi)) = self.clamp_range {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidConfig(format!(
                    "bad clamp range ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }

    /// Window rows/cols around `centre`, clamped to `[0, len)`. Even windows
    /// extend one further on the high side.
    fn span(&self, centre: usize, len: usize) -> std::ops::RangeInclusive<usize> {
        let lo = (self.window - 1) / 2;
        let hi = self.window / 2;
        centre.saturating_sub(lo)..=(centre + hi).min(len - 1)
    }
}

/// Contiguous HR index range owned by each LR index along one axis.
fn owned_ranges(
    hr_len: usize,
    lr_len: usize,
    owner: impl Fn(usize) -> usize,
) -> Vec<(usize, usize)> {
    let mut ranges = vec![(usize::MAX, 0); lr_len];
    for p in 0..hr_len {
        let o = owner(p);
        let r = &mut ranges[o];
        r.0 = r.0.min(p);
        r.1 = r.1.max(p + 1);
    }
    ranges
}

/// Builds the local prior on the HR grid.
pub fn generate_local_prior(
    lr_tau: &Plane,
    hr_intensity: &Plane,
    map: &SamplingMap,
    cfg: &LocalPriorConfig,
) -> Result<Plane> {
    cfg.validate()?;
    let lr = lr_tau.values();
    let intensity = hr_intensity.values();
    if lr.dim() != map.lr_shape() {
        let (a, b) = map.lr_shape();
        return Err(Error::shape(&[a, b], &[lr.dim().0, lr.dim().1]));
    }
    if intensity.dim() != map.hr_shape() {
        let (a, b) = map.hr_shape();
        return Err(Error::shape(
            &[a, b],
            &[intensity.dim().0, intensity.dim().1],
        ));
    }
    let valid: Vec<f64> = lr.iter().copied().filter(|v| v.is_finite()).collect();
    if valid.is_empty() {
        return Err(Error::NoUsableSamples);
    }
    let global_mean = valid.iter().sum::<f64>() / valid.len() as f64;

    let (m, n) = map.lr_shape();
    let (hm, hn) = map.hr_shape();
    let row_ranges = owned_ranges(hm, m, |r| map.owner(r, 0).0);
    let col_ranges = owned_ranges(hn, n, |c| map.owner(0, c).1);
    let sample_intensity = Array2::from_shape_fn((m, n), |(i, j)| intensity[map.hr_position(i, j)]);

    let mut out = Array2::zeros((hm, hn));
    let mut pairs = Vec::with_capacity(cfg.window * cfg.window);
    for i in 0..m {
        for j in 0..n {
            pairs.clear();
            for wi in cfg.span(i, m) {
                for wj in cfg.span(j, n) {
                    pairs.push((sample_intensity[[wi, wj]], lr[[wi, wj]]));
                }
            }
            let f = match fit_window(&pairs, cfg.function) {
                Ok(f) => f,
                Err(Degenerate { mean }) => WindowFunction::constant(mean.unwrap_or(global_mean)),
            };
            let (r0, r1) = row_ranges[i];
            let (c0, c1) = col_ranges[j];
            for r in r0..r1 {
                for c in c0..c1 {
                    let mut v = f.eval(intensity[[r, c]]);
                    if let Some((lo, hi)) = cfg.clamp_range {
                        v = v.clamp(lo, hi);
                    }
                    out[[r, c]] = v.max(0.0);
                }
            }
        }
    }
    // pin sampled pixels to their measurements so rounding in the fit never leaks
    for ((i, j), &t) in lr.indexed_iter() {
        if t.is_finite() {
            let v = cfg.clamp_range.map_or(t, |(lo, hi)| t.clamp(lo, hi));
            out[map.hr_position(i, j)] = v.max(0.0);
        }
    }
    Plane::new(out, Role::Prior, lr_tau.units())
}

/// One row of a window/function sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub window: usize,
    pub function: LocalFunction,
    pub mae: f64,
    pub psnr_db: f64,
}

/// Evaluates every `(window, function)` combination against ground truth,
/// sorted by ascending MAE.
pub fn sweep_local_configs(
    lr_tau: &Plane,
    hr_intensity: &Plane,
    gt_tau: &Plane,
    map: &SamplingMap,
    windows: &[usize],
    functions: &[LocalFunction],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(windows.len() * functions.len());
    for &window in windows {
        for &function in functions {
            let cfg = LocalPriorConfig {
                window,
                function,
                clamp_range: None,
            };
            let prior = generate_local_prior(lr_tau, hr_intensity, map, &cfg)?;
            rows.push(SweepRow {
                window,
                function,
                mae: metrics::mae(gt_tau.values(), prior.values(), None)?,
                psnr_db: metrics::psnr(gt_tau.values(), prior.values(), None)?,
            });
        }
    }
    rows.sort_by(|a, b| a.mae.total_cmp(&b.mae));
    Ok(rows)
}

/// Renders a sweep table as CSV.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("window,function,mae,psnr_db,lpips\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},not_computed\n",
            r.window, r.function, r.mae, r.psnr_db
        ));
    }
    out
}
