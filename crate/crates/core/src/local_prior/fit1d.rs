//! One-dimensional intensity-to-lifetime maps fitted inside a single window.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Function family fitted in each window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalFunction {
    Nearest,
    Linear,
    /// Natural cubic spline through the samples.
    Cubic,
    SplineLinear,
    SplineQuadratic,
    SplineCubic,
    /// Gaussian-process regression with an RBF kernel.
    RbfGp,
}

impl LocalFunction {
    pub const ALL: [LocalFunction; 7] = [
        LocalFunction::Nearest,
        LocalFunction::Linear,
        LocalFunction::Cubic,
        LocalFunction::SplineLinear,
        LocalFunction::SplineQuadratic,
        LocalFunction::SplineCubic,
        LocalFunction::RbfGp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LocalFunction::Nearest => "nearest",
            LocalFunction::Linear => "linear",
            LocalFunction::Cubic => "cubic",
            LocalFunction::SplineLinear => "spline_linear",
            LocalFunction::SplineQuadratic => "spline_quadratic",
            LocalFunction::SplineCubic => "spline_cubic",
            LocalFunction::RbfGp => "rbf_gp",
        }
    }

    /// Whether the fitted map passes through every (averaged) sample.
    pub fn is_interpolatory(self) -> bool {
        matches!(
            self,
            LocalFunction::Nearest | LocalFunction::Linear | LocalFunction::Cubic
        )
    }
}

impl fmt::Display for LocalFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LocalFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        LocalFunction::ALL
            .into_iter()
            .find(|f| f.name() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown local prior function `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Model {
    Constant(f64),
    Nearest {
        xs: Vec<f64>,
        ys: Vec<f64>,
    },
    Linear {
        xs: Vec<f64>,
        ys: Vec<f64>,
    },
    Cubic {
        xs: Vec<f64>,
        ys: Vec<f64>,
        m: Vec<f64>,
    },
    BSpline {
        degree: usize,
        knots: Vec<f64>,
        coefs: Vec<f64>,
    },
    Gp {
        xs: Vec<f64>,
        weights: Vec<f64>,
        mean: f64,
        length: f64,
        variance: f64,
    },
}

/// A fitted intensity-to-lifetime map together with its intensity support.
/// Inputs outside the support are clamped to it before evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowFunction {
    model: Model,
    support: (f64, f64),
}

/// Returned when a window holds fewer than two distinct intensities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Degenerate {
    /// Mean lifetime of the valid samples, if there are any.
    pub mean: Option<f64>,
}

impl WindowFunction {
    pub fn constant(value: f64) -> Self {
        WindowFunction {
            model: Model::Constant(value),
            support: (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.model, Model::Constant(_))
    }

    pub fn eval(&self, intensity: f64) -> f64 {
        let x = intensity.clamp(self.support.0, self.support.1);
        match &self.model {
            Model::Constant(c) => *c,
            Model::Nearest { xs, ys } => {
                let k = upper_index(xs, x);
                if x - xs[k - 1] <= xs[k] - x {
                    ys[k - 1]
                } else {
                    ys[k]
                }
            }
            Model::Linear { xs, ys } => {
                let k = upper_index(xs, x);
                let t = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
                ys[k - 1] + t * (ys[k] - ys[k - 1])
            }
            Model::Cubic { xs, ys, m } => {
                let k = upper_index(xs, x);
                let h = xs[k] - xs[k - 1];
                let a = (xs[k] - x) / h;
                let b = (x - xs[k - 1]) / h;
                a * ys[k - 1]
                    + b * ys[k]
                    + ((a * a * a - a) * m[k - 1] + (b * b * b - b) * m[k]) * h * h / 6.0
            }
            Model::BSpline {
                degree,
                knots,
                coefs,
            } => de_boor(*degree, knots, coefs, x),
            Model::Gp {
                xs,
                weights,
                mean,
                length,
                variance,
            } => {
                mean + xs
                    .iter()
                    .zip(weights)
                    .map(|(&xi, &w)| w * rbf(x, xi, *length, *variance))
                    .sum::<f64>()
            }
        }
    }
}

/// Index `k >= 1` with `xs[k-1] <= x <= xs[k]`, for `x` inside the support.
fn upper_index(xs: &[f64], x: f64) -> usize {
    xs.partition_point(|&v| v < x).clamp(1, xs.len() - 1)
}

/// Sorts the pairs by intensity, drops invalid ones and averages lifetimes
/// that share an intensity.
pub fn prepare_samples(samples: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut valid: Vec<(f64, f64)> = samples
        .iter()
        .copied()
        .filter(|(i, t)| i.is_finite() && t.is_finite())
        .collect();
    valid.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(valid.len());
    let mut k = 0;
    while k < valid.len() {
        let x = valid[k].0;
        let mut end = k;
        let mut sum = 0.0;
        while end < valid.len() && valid[end].0 == x {
            sum += valid[end].1;
            end += 1;
        }
        out.push((x, sum / (end - k) as f64));
        k = end;
    }
    out
}

/// Fits `function` to `(intensity, lifetime)` pairs. Pairs with non-finite
/// entries are ignored.
pub fn fit_window(
    samples: &[(f64, f64)],
    function: LocalFunction,
) -> std::result::Result<WindowFunction, Degenerate> {
    let valid: Vec<f64> = samples
        .iter()
        .filter(|(i, t)| i.is_finite() && t.is_finite())
        .map(|&(_, t)| t)
        .collect();
    let points = prepare_samples(samples);
    if points.len() < 2 {
        let mean = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
        return Err(Degenerate { mean });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let support = (xs[0], xs[xs.len() - 1]);
    let model = match function {
        LocalFunction::Nearest => Model::Nearest { xs, ys },
        LocalFunction::Linear => Model::Linear { xs, ys },
        LocalFunction::Cubic => {
            let m = natural_spline_moments(&xs, &ys);
            Model::Cubic { xs, ys, m }
        }
        LocalFunction::SplineLinear => bspline_fit(&xs, &ys, 1),
        LocalFunction::SplineQuadratic => bspline_fit(&xs, &ys, 2),
        LocalFunction::SplineCubic => bspline_fit(&xs, &ys, 3),
        LocalFunction::RbfGp => gp_fit(&xs, &ys),
    };
    Ok(WindowFunction { model, support })
}

/// Second derivatives of the natural cubic spline (tridiagonal solve).
fn natural_spline_moments(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    let mut diag = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut upper = vec![0.0; n];
    for i in 1..n - 1 {
        let h0 = xs[i] - xs[i - 1];
        let h1 = xs[i + 1] - xs[i];
        diag[i] = 2.0 * (h0 + h1);
        upper[i] = h1;
        rhs[i] = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
        if i > 1 {
            // eliminate the sub-diagonal entry h0
            let w = h0 / diag[i - 1];
            diag[i] -= w * upper[i - 1];
            rhs[i] -= w * rhs[i - 1];
        }
    }
    for i in (1..n - 1).rev() {
        m[i] = (rhs[i] - upper[i] * m[i + 1]) / diag[i];
    }
    m
}

/// Least-squares B-spline regression with interior knots at sample quantiles.
fn bspline_fit(xs: &[f64], ys: &[f64], degree: usize) -> Model {
    let n = xs.len();
    let degree = degree.min(n - 1);
    let interior = (n - (degree + 1)) / 2;
    let (lo, hi) = (xs[0], xs[n - 1]);
    let mut knots = vec![lo; degree + 1];
    for j in 1..=interior {
        let pos = j as f64 * (n - 1) as f64 / (interior + 1) as f64;
        let k = pos.floor() as usize;
        let frac = pos - k as f64;
        let knot = if k + 1 < n {
            xs[k] + frac * (xs[k + 1] - xs[k])
        } else {
            xs[k]
        };
        knots.push(knot);
    }
    knots.extend(std::iter::repeat(hi).take(degree + 1));
    let nb = knots.len() - degree - 1;

    let mut normal = vec![0.0; nb * nb];
    let mut rhs = vec![0.0; nb];
    let mut basis = vec![0.0; nb];
    for (&x, &y) in xs.iter().zip(ys) {
        basis_values(degree, &knots, x, &mut basis);
        for a in 0..nb {
            if basis[a] == 0.0 {
                continue;
            }
            rhs[a] += basis[a] * y;
            for b in 0..nb {
                normal[a * nb + b] += basis[a] * basis[b];
            }
        }
    }
    let trace: f64 = (0..nb).map(|a| normal[a * nb + a]).sum();
    let ridge = 1e-10 * trace / nb as f64;
    for a in 0..nb {
        normal[a * nb + a] += ridge;
    }
    let coefs = cholesky_solve(&mut normal, nb, &rhs).unwrap_or_else(|| {
        let mean = ys.iter().sum::<f64>() / n as f64;
        vec![mean; nb]
    });
    Model::BSpline {
        degree,
        knots,
        coefs,
    }
}

fn find_span(degree: usize, knots: &[f64], x: f64) -> usize {
    let nb = knots.len() - degree - 1;
    if x >= knots[nb] {
        return nb - 1;
    }
    // last span index s with knots[s] <= x < knots[s+1]
    let mut s = knots.partition_point(|&k| k <= x) - 1;
    s = s.clamp(degree, nb - 1);
    s
}

/// All B-spline basis values at `x` (Cox-de Boor).
fn basis_values(degree: usize, knots: &[f64], x: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let span = find_span(degree, knots, x);
    let mut n = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom != 0.0 { n[r] / denom } else { 0.0 };
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    for (r, v) in n.into_iter().enumerate() {
        out[span - degree + r] = v;
    }
}

fn de_boor(degree: usize, knots: &[f64], coefs: &[f64], x: f64) -> f64 {
    let mut basis = vec![0.0; coefs.len()];
    basis_values(degree, knots, x, &mut basis);
    basis.iter().zip(coefs).map(|(b, c)| b * c).sum()
}

fn rbf(a: f64, b: f64, length: f64, variance: f64) -> f64 {
    let d = (a - b) / length;
    variance * (-0.5 * d * d).exp()
}

/// GP posterior mean with length-scale = half the intensity range and noise
/// variance = 1e-4 of the lifetime variance.
fn gp_fit(xs: &[f64], ys: &[f64]) -> Model {
    let n = xs.len();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let variance = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64;
    if variance <= 0.0 {
        return Model::Constant(mean);
    }
    let length = (xs[n - 1] - xs[0]) / 2.0;
    let noise = 1e-4 * variance;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = rbf(xs[i], xs[j], length, variance);
        }
        k[i * n + i] += noise;
    }
    let centred: Vec<f64> = ys.iter().map(|y| y - mean).collect();
    match cholesky_solve(&mut k, n, &centred) {
        Some(weights) => Model::Gp {
            xs: xs.to_vec(),
            weights,
            mean,
            length,
            variance,
        },
        None => Model::Constant(mean),
    }
}

/// Solves `A x = b` for symmetric positive-definite `A` (row-major, in place).
fn cholesky_solve(a: &mut [f64], n: usize, b: &[f64]) -> Option<Vec<f64>> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= a[i * n + k] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= a[k * n + i] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    Some(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_line() {
        let f = fit_window(&[(10.0, 1.0), (20.0, 2.0)], LocalFunction::Linear).unwrap();
        assert_eq!(f.eval(15.0), 1.5);
        // clamped extrapolation
        assert_eq!(f.eval(100.0), 2.0);
        assert_eq!(f.eval(-5.0), 1.0);
    }

    #[test]
    fn duplicates_are_averaged() {
        let pairs = [(10.0, 1.0), (10.0, 3.0), (20.0, 5.0)];
        let direct_mean = (1.0 + 3.0) / 2.0;
        let f = fit_window(&pairs, LocalFunction::Linear).unwrap();
        assert_eq!(f.eval(10.0), direct_mean);
        assert_eq!(
            fit_window(&[(10.0, 1.0), (10.0, 3.0)], LocalFunction::Linear),
            Err(Degenerate { mean: Some(2.0) })
        );
    }

    #[test]
    fn single_intensity_is_degenerate() {
        for func in LocalFunction::ALL {
            assert!(fit_window(&[(4.0, 1.0), (4.0, 1.0), (4.0, 1.0)], func).is_err());
            assert_eq!(
                fit_window(&[(f64::NAN, 1.0), (2.0, f64::NAN)], func),
                Err(Degenerate { mean: None })
            );
        }
    }

    #[test]
    fn interpolatory_functions_hit_samples() {
        let pairs: Vec<(f64, f64)> = (0..9)
            .map(|k| {
                (
                    k as f64 * 3.0 + (k * k) as f64,
                    (k as f64 * 0.7).sin() + 2.0,
                )
            })
            .collect();
        for func in [
            LocalFunction::Nearest,
            LocalFunction::Linear,
            LocalFunction::Cubic,
        ] {
            let f = fit_window(&pairs, func).unwrap();
            for &(x, y) in &pairs {
                assert!((f.eval(x) - y).abs() < 1e-12, "{func} at {x}");
            }
        }
    }

    #[test]
    fn every_family_reproduces_affine_data() {
        let pairs: Vec<(f64, f64)> = (0..25)
            .map(|k| (k as f64 * 4.0 + 7.0, 0.01 * (k as f64 * 4.0 + 7.0) + 1.0))
            .collect();
        for func in LocalFunction::ALL {
            let f = fit_window(&pairs, func).unwrap();
            for x in [7.0, 30.5, 55.0, 103.0] {
                let expected = 0.01 * x + 1.0;
                let tol = match func {
                    LocalFunction::Nearest => 0.021,
                    LocalFunction::RbfGp => 5e-3,
                    _ => 1e-8,
                };
                assert!(
                    (f.eval(x) - expected).abs() < tol,
                    "{func} at {x}: {}",
                    f.eval(x)
                );
            }
        }
    }

    #[test]
    fn bspline_basis_partitions_unity() {
        let knots = [0.0, 0.0, 0.0, 0.0, 1.0, 2.5, 4.0, 4.0, 4.0, 4.0];
        let mut b = vec![0.0; 6];
        for x in [0.0, 0.3, 1.0, 2.2, 3.9, 4.0] {
            basis_values(3, &knots, x, &mut b);
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn monotone_between_two_samples() {
        let f = fit_window(&[(100.0, 3.0), (300.0, 1.0)], LocalFunction::Linear).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..=40 {
            let v = f.eval(100.0 + 5.0 * k as f64);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn names_round_trip() {
        for func in LocalFunction::ALL {
            assert_eq!(func.name().parse::<LocalFunction>().unwrap(), func);
        }
        assert_eq!(
            "spline-cubic".parse::<LocalFunction>().unwrap(),
            LocalFunction::SplineCubic
        );
        assert!("kriging".parse::<LocalFunction>().is_err());
    }
}
