//! Image comparison metrics: PSNR, SSIM and MAE.
//!
//! The first argument is always the reference (ground truth).

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default SSIM window side.
pub const SSIM_WINDOW: usize = 25;

fn same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            &[a.nrows(), a.ncols()],
            &[b.nrows(), b.ncols()],
        ));
    }
    Ok(())
}

fn finite(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{what} plane contains non-finite values"
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB. `peak` defaults to `max |reference|`.
/// Identical inputs give `f64::INFINITY`.
pub fn psnr(reference: &Array2<f64>, test: &Array2<f64>, peak: Option<f64>) -> Result<f64> {
    same_shape(reference, test)?;
    finite(reference, "reference")?;
    finite(test, "test")?;
    let peak = peak.unwrap_or_else(|| reference.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let mse = Zip::from(reference)
        .and(test)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b))
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean absolute error over pixels whose mask value exceeds 0.5 (all pixels
/// without a mask).
pub fn mae(reference: &Array2<f64>, test: &Array2<f64>, mask: Option<&Array2<f64>>) -> Result<f64> {
    same_shape(reference, test)?;
    let (mut sum, mut n) = (0.0, 0usize);
    match mask {
        Some(m) => {
            same_shape(reference, m)?;
            Zip::from(reference)
                .and(test)
                .and(m)
                .for_each(|&a, &b, &w| {
                    if w > 0.5 {
                        sum += (a - b).abs();
                        n += 1;
                    }
                });
        }
        None => {
            Zip::from(reference)
                .and(test)
                .for_each(|&a, &b| sum += (a - b).abs());
            n = reference.len();
        }
    }
    if n == 0 {
        return Err(Error::InvalidValue("mask selects no pixels".into()));
    }
    if !sum.is_finite() {
        return Err(Error::NonFinite(
            "mae input contains non-finite values".into(),
        ));
    }
    Ok(sum / n as f64)
}

/// SSIM with uniform `window`×`window` windows at stride 1 over valid
/// positions only. The dynamic range is that of the reference.
pub fn ssim(reference: &Array2<f64>, test: &Array2<f64>, window: usize) -> Result<f64> {
    finite(reference, "reference")?;
    let lo = reference.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    ssim_with_range(reference, test, window, range)
}

/// SSIM with an explicit dynamic range `L`.
pub fn ssim_with_range(a: &Array2<f64>, b: &Array2<f64>, window: usize, range: f64) -> Result<f64> {
    same_shape(a, b)?;
    finite(a, "reference")?;
    finite(b, "test")?;
    let (rows, cols) = a.dim();
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidValue(format!(
            "ssim window must be odd, got {window}"
        )));
    }
    if window > rows || window > cols {
        return Err(Error::InvalidValue(format!(
            "ssim window {window} exceeds image {rows}x{cols}"
        )));
    }
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "ssim range must be positive, got {range}"
        )));
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    // centring keeps the summed-area tables well conditioned
    let ma = a.mean().unwrap();
    let mb = b.mean().unwrap();
    let x = a.mapv(|v| v - ma);
    let y = b.mapv(|v| v - mb);
    let sx = integral(&x, |v, _| v, &y);
    let sy = integral(&y, |v, _| v, &x);
    let sxx = integral(&x, |v, _| v * v, &y);
    let syy = integral(&y, |v, _| v * v, &x);
    let sxy = integral(&x, |v, w| v * w, &y);
    let n = (window * window) as f64;
    let mut total = 0.0;
    for r in 0..=rows - window {
        for c in 0..=cols - window {
            let bx = box_sum(&sx, r, c, window);
            let by = box_sum(&sy, r, c, window);
            let mx = bx / n;
            let my = by / n;
            let vx = (box_sum(&sxx, r, c, window) / n - mx * mx).max(0.0);
            let vy = (box_sum(&syy, r, c, window) / n - my * my).max(0.0);
            let cxy = box_sum(&sxy, r, c, window) / n - mx * my;
            let (ux, uy) = (mx + ma, my + mb);
            total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
    }
    Ok(total / ((rows - window + 1) * (cols - window + 1)) as f64)
}

fn integral(x: &Array2<f64>, f: impl Fn(f64, f64) -> f64, y: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = x.dim();
    let mut s = Array2::zeros((rows + 1, cols + 1));
    for r in 0..rows {
        let mut run = 0.0;
        for c in 0..cols {
            run += f(x[[r, c]], y[[r, c]]);
            s[[r + 1, c + 1]] = s[[r, c + 1]] + run;
        }
    }
    s
}

fn box_sum(s: &Array2<f64>, r: usize, c: usize, w: usize) -> f64 {
    s[[r + w, c + w]] - s[[r, c + w]] - s[[r + w, c]] + s[[r, c]]
}

/// What `evaluate` writes. `psnr_db` is `None` when the planes are identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub psnr_db: Option<f64>,
    pub ssim: f64,
    pub mae: f64,
    pub peak: f64,
    /// `ground_truth_max` or `explicit`.
    pub peak_convention: String,
    pub ssim_window: usize,
    pub mae_masked: bool,
    pub lpips: String,
}

/// PSNR, SSIM and MAE of `test` against `reference`. The mask only restricts
/// the MAE.
pub fn evaluate(
    reference: &Array2<f64>,
    test: &Array2<f64>,
    mask: Option<&Array2<f64>>,
    peak: Option<f64>,
) -> Result<Evaluation> {
    let gt_peak = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let used = peak.unwrap_or(gt_peak);
    let p = psnr(reference, test, Some(used))?;
    let window = SSIM_WINDOW.min(odd_floor(reference.nrows().min(reference.ncols())));
    Ok(Evaluation {
        psnr_db: p.is_finite().then_some(p),
        ssim: ssim(reference, test, window)?,
        mae: mae(reference, test, mask)?,
        peak: used,
        peak_convention: if peak.is_some() {
            "explicit"
        } else {
            "ground_truth_max"
        }
        .into(),
        ssim_window: window,
        mae_masked: mask.is_some(),
        lpips: "not computed".into(),
    })
}

fn odd_floor(n: usize) -> usize {
    if n % 2 == 0 {
        n.saturating_sub(1).max(1)
    } else {
        n
    }
}
