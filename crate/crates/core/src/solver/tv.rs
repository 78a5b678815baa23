//! Forward-difference gradient operator `D` and its exact adjoint.

use ndarray::{Array2, Zip};

/// Horizontal and vertical forward differences, each the size of the image.
/// The last column of `dx` and the last row of `dy` are always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub dx: Array2<f64>,
    pub dy: Array2<f64>,
}

impl GradientField {
    pub fn zeros(shape: (usize, usize)) -> Self {
        GradientField {
            dx: Array2::zeros(shape),
            dy: Array2::zeros(shape),
        }
    }

    pub fn dot(&self, other: &GradientField) -> f64 {
        Zip::from(&self.dx)
            .and(&other.dx)
            .fold(0.0, |a, &p, &q| a + p * q)
            + Zip::from(&self.dy)
                .and(&other.dy)
                .fold(0.0, |a, &p, &q| a + p * q)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Sum of absolute values (anisotropic TV when applied to `D x`).
    pub fn l1(&self) -> f64 {
        self.dx.iter().chain(self.dy.iter()).map(|v| v.abs()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.dx.iter().chain(self.dy.iter()).all(|v| v.is_finite())
    }

    /// `self + k * other`, elementwise.
    pub fn scaled_add(&self, k: f64, other: &GradientField) -> GradientField {
        GradientField {
            dx: &self.dx + &(&other.dx * k),
            dy: &self.dy + &(&other.dy * k),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GradientField {
        GradientField {
            dx: self.dx.mapv(&f),
            dy: self.dy.mapv(&f),
        }
    }
}

pub fn tv_forward(x: &Array2<f64>) -> GradientField {
    let (rows, cols) = x.dim();
    let mut g = GradientField::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                g.dx[[r, c]] = x[[r, c + 1]] - x[[r, c]];
            }
            if r + 1 < rows {
                g.dy[[r, c]] = x[[r + 1, c]] - x[[r, c]];
            }
        }
    }
    g
}

/// `Dᵀ u`: negative divergence with the boundary matching [`tv_forward`].
pub fn tv_adjoint(u: &GradientField) -> Array2<f64> {
    let (rows, cols) = u.dx.dim();
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let mut v = 0.0;
            if c + 1 < cols {
                v -= u.dx[[r, c]];
            }
            if c > 0 {
                v += u.dx[[r, c - 1]];
            }
            if r + 1 < rows {
                v -= u.dy[[r, c]];
            }
            if r > 0 {
                v += u.dy[[r - 1, c]];
            }
            out[[r, c]] = v;
        }
    }
    out
}

/// `sign(v) * max(|v| - kappa, 0)`.
pub fn shrink(v: f64, kappa: f64) -> f64 {
    if v > kappa {
        v - kappa
    } else if v < -kappa {
        v + kappa
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = tv_forward(&Array2::from_elem((5, 7), 3.2));
        assert_eq!(g.l1(), 0.0);
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = random(&mut rng, (8, 8));
            let u = GradientField {
                dx: random(&mut rng, (8, 8)),
                dy: random(&mut rng, (8, 8)),
            };
            let lhs = tv_forward(&x).dot(&u);
            let rhs = (&x * &tv_adjoint(&u)).sum();
            assert!((lhs - rhs).abs() <= 1e-12);
        }
    }

    #[test]
    fn operator_norm_bounded_by_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for shape in [(1, 1), (1, 9), (2, 2), (8, 8), (13, 5), (32, 32)] {
            let mut x = random(&mut rng, shape);
            let mut est = 0.0;
            for _ in 0..500 {
                let y = tv_adjoint(&tv_forward(&x));
                let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    break;
                }
                est = n / x.iter().map(|v| v * v).sum::<f64>().sqrt();
                x = y / n;
            }
            assert!(est <= 8.0 + 1e-9, "{shape:?}: {est}");
        }
    }

    #[test]
    fn shrink_table() {
        assert_eq!(shrink(3.0, 1.0), 2.0);
        assert_eq!(shrink(-0.5, 1.0), 0.0);
        assert_eq!(shrink(-3.0, 1.0), -2.0);
        assert_eq!(shrink(1.0, 1.0), 0.0);
        assert_eq!(shrink(0.7, 0.0), 0.7);
    }
}
