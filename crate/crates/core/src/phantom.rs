//! Synthetic FLIM scenes and Poisson-noised decay datacubes.
//!
//! Each structure carries one fluorophore with radiative rate `k_r` and
//! non-radiative rate `k_nr`, so `τ = 1 / (k_r + k_nr)` and the quantum yield
//! is `Q = k_r τ`. Intensity is `gain · Ñ(p) · ε · Q`, where `Ñ` is the
//! concentration field and `gain` lumps excitation power, collection angle,
//! detector efficiency and exposure into one calibration constant.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Datacube, Plane, Role};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fluorophore {
    /// Radiative rate (1/ns).
    pub k_r: f64,
    /// Non-radiative rate (1/ns).
    pub k_nr: f64,
    /// Concentration amplitude multiplying the concentration field.
    pub amplitude: f64,
    /// Absorptivity.
    pub epsilon: f64,
}

impl Fluorophore {
    pub fn lifetime(&self) -> f64 {
        1.0 / (self.k_r + self.k_nr)
    }

    pub fn quantum_yield(&self) -> f64 {
        self.k_r * self.lifetime()
    }

    /// Rates giving lifetime `tau` (ns) and quantum yield `q`.
    pub fn with_lifetime(tau: f64, q: f64, amplitude: f64, epsilon: f64) -> Self {
        let k_r = q / tau;
        Fluorophore {
            k_r,
            k_nr: 1.0 / tau - k_r,
            amplitude,
            epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Disc; coordinates are (row, col) in pixels.
    Blob { center: (f64, f64), radius: f64 },
    /// Segment thickened to `width`.
    Ridge {
        start: (f64, f64),
        end: (f64, f64),
        width: f64,
    },
}

impl Shape {
    pub fn covers(&self, r: f64, c: f64) -> bool {
        match *self {
            Shape::Blob { center, radius } => {
                let (dr, dc) = (r - center.0, c - center.1);
                dr * dr + dc * dc <= radius * radius
            }
            Shape::Ridge { start, end, width } => {
                let (vr, vc) = (end.0 - start.0, end.1 - start.1);
                let len2 = vr * vr + vc * vc;
                let t = if len2 > 0.0 {
                    (((r - start.0) * vr + (c - start.1) * vc) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (dr, dc) = (r - start.0 - t * vr, c - start.1 - t * vc);
                (dr * dr + dc * dc).sqrt() <= 0.5 * width
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub shape: Shape,
    pub fluorophore: Fluorophore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concentration {
    /// `Ñ = 1` everywhere.
    Uniform,
    /// A sum of broad Gaussian bumps over a floor.
    Smooth,
    /// Independent per-pixel values.
    Rough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomScene {
    pub shape: (usize, usize),
    /// Later structures are drawn over earlier ones.
    pub structures: Vec<Structure>,
    /// `None` calibrates the gain so the brightest pixel gets `photon_budget`.
    pub gain: Option<f64>,
    pub photon_budget: f64,
    pub concentration: Concentration,
    pub seed: u64,
}

impl PhantomScene {
    pub fn validate(&self) -> Result<()> {
        if self.shape.0 == 0 || self.shape.1 == 0 {
            return Err(Error::InvalidConfig(
                "phantom shape must be positive".into(),
            ));
        }
        if self.structures.is_empty() {
            return Err(Error::InvalidConfig(
                "phantom needs at least one structure".into(),
            ));
        }
        for s in &self.structures {
            let f = s.fluorophore;
            if !(f.k_r > 0.0 && f.k_nr >= 0.0 && f.amplitude >= 0.0 && f.epsilon >= 0.0) {
                return Err(Error::InvalidConfig(format!("invalid fluorophore {f:?}")));
            }
        }
        if !(self.photon_budget >= 1.0) {
            return Err(Error::InvalidConfig("photon_budget must be >= 1".into()));
        }
        if let Some(g) = self.gain {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::InvalidConfig(format!("gain must be >= 0, got {g}")));
            }
        }
        Ok(())
    }

    /// Index of the topmost structure at each pixel.
    pub fn label_map(&self) -> Array2<Option<usize>> {
        Array2::from_shape_fn(self.shape, |(r, c)| {
            self.structures
                .iter()
                .rposition(|s| s.shape.covers(r as f64, c as f64))
        })
    }

    /// The concentration field before per-structure amplitudes.
    pub fn concentration_field(&self) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (rows, cols) = self.shape;
        match self.concentration {
            Concentration::Uniform => Array2::ones(self.shape),
            Concentration::Smooth => {
                let scale = rows.max(cols) as f64;
                let bumps: Vec<(f64, f64, f64, f64)> = (0..6)
                    .map(|_| {
                        (
                            rng.random_range(0.0..rows as f64),
                            rng.random_range(0.0..cols as f64),
                            rng.random_range(0.3..1.0),
                            rng.random_range(0.1 * scale..0.25 * scale),
                        )
                    })
                    .collect();
                Array2::from_shape_fn(self.shape, |(r, c)| {
                    0.4 + bumps
                        .iter()
                        .map(|&(br, bc, h, s)| {
                            let d2 = (r as f64 - br).powi(2) + (c as f64 - bc).powi(2);
                            h * (-d2 / (2.0 * s * s)).exp()
                        })
                        .sum::<f64>()
                })
            }
            Concentration::Rough => {
                Array2::from_shape_fn(self.shape, |_| rng.random_range(0.2..1.0))
            }
        }
    }
}

/// Ground-truth lifetime (ns) and intensity (photons) planes.
pub fn generate_scene(scene: &PhantomScene) -> Result<(Plane, Plane)> {
    scene.validate()?;
    let labels = scene.label_map();
    let field = scene.concentration_field();
    let mut tau = Array2::zeros(scene.shape);
    let mut brightness = Array2::zeros(scene.shape);
    for ((p, label), &n) in labels.indexed_iter().zip(field.iter()) {
        if let Some(k) = *label {
            let f = scene.structures[k].fluorophore;
            let t = f.lifetime();
            tau[p] = t;
            brightness[p] = n * f.amplitude * f.epsilon * f.k_r * t;
        }
    }
    let gain = scene.gain.unwrap_or_else(|| {
        let peak = brightness.iter().cloned().fold(0.0, f64::max);
        if peak > 0.0 {
            scene.photon_budget / peak
        } else {
            0.0
        }
    });
    let intensity = brightness.mapv(|b| gain * b);
    Ok((
        Plane::new(tau, Role::Lifetime, "ns")?,
        Plane::new(intensity, Role::Intensity, "photon counts")?,
    ))
}

/// Gain actually applied by [`generate_scene`].
pub fn effective_gain(scene: &PhantomScene) -> Result<f64> {
    if let Some(g) = scene.gain {
        return Ok(g);
    }
    let unit = PhantomScene {
        gain: Some(1.0),
        ..scene.clone()
    };
    let (_, i) = generate_scene(&unit)?;
    let peak = i.values().iter().cloned().fold(0.0, f64::max);
    Ok(if peak > 0.0 {
        scene.photon_budget / peak
    } else {
        0.0
    })
}

/// Mono-exponential decays with a delta instrument response. Pixel `p`
/// draws from its own generator stream, so the result does not depend on
/// traversal order.
pub fn generate_datacube(
    gt_tau: &Plane,
    gt_intensity: &Plane,
    bins: usize,
    bin_width: f64,
    seed: u64,
) -> Result<Datacube> {
    if gt_tau.shape() != gt_intensity.shape() {
        let (a, b) = (gt_tau.shape(), gt_intensity.shape());
        return Err(Error::shape(&[a.0, a.1], &[b.0, b.1]));
    }
    if bins == 0 || !(bin_width > 0.0) {
        return Err(Error::InvalidConfig(
            "bins and bin_width must be positive".into(),
        ));
    }
    let (rows, cols) = gt_tau.shape();
    let mut counts = Array3::zeros((rows, cols, bins));
    for r in 0..rows {
        for c in 0..cols {
            let tau = gt_tau.values()[[r, c]];
            let total = gt_intensity.values()[[r, c]];
            if !(tau > 0.0) || !(total > 0.0) {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((r * cols + c) as u64);
            let norm = 1.0 - (-(bins as f64) * bin_width / tau).exp();
            for t in 0..bins {
                let a = (-(t as f64) * bin_width / tau).exp();
                let b = (-((t + 1) as f64) * bin_width / tau).exp();
                let expected = total * (a - b) / norm;
                if expected > 0.0 {
                    let draw: f64 = Poisson::new(expected)
                        .map_err(|e| Error::InvalidValue(e.to_string()))?
                        .sample(&mut rng);
                    counts[[r, c, t]] = draw;
                }
            }
        }
    }
    Datacube::new(counts, bin_width, Some(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Blobs at 1 ns and ridges at 3 ns over a smooth concentration field.
    TwoClass,
    /// Full-height stripes whose lifetime is exactly `0.01 ns/count · I + 1 ns`.
    AffineLocal,
    /// Two-class geometry with per-pixel concentration noise and equal
    /// brightness per class, so intensity carries no lifetime information
    /// inside structures.
    Rough,
    /// Two-class materials with features finer than coarse sampling pitches.
    Undersampled,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::TwoClass,
        Preset::AffineLocal,
        Preset::Rough,
        Preset::Undersampled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::TwoClass => "two-class",
            Preset::AffineLocal => "affine-local",
            Preset::Rough => "rough",
            Preset::Undersampled => "undersampled",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s.replace('_', "-"))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown phantom preset `{s}`")))
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Blob and ridge lifetimes of the two-class presets (ns).
pub const BLOB_TAU: f64 = 1.0;
pub const RIDGE_TAU: f64 = 3.0;
/// Slope (ns/count) and intercept (ns) of the affine-local preset.
pub const AFFINE_SLOPE: f64 = 0.01;
pub const AFFINE_INTERCEPT: f64 = 1.0;

/// Builds a preset scene of `size`×`size` pixels.
pub fn preset_scene(preset: Preset, size: usize, seed: u64) -> Result<PhantomScene> {
    if size < 8 {
        return Err(Error::InvalidConfig(format!(
            "phantom size must be >= 8, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151_f05u64);
    let s = size as f64;
    let scene = |structures, concentration, gain| PhantomScene {
        shape: (size, size),
        structures,
        gain,
        photon_budget: 1e4,
        concentration,
        seed,
    };
    match preset {
        Preset::TwoClass => {
            let blob = Fluorophore::with_lifetime(BLOB_TAU, 0.5, 1.0, 1.0);
            let ridge = Fluorophore::with_lifetime(RIDGE_TAU, 0.3, 1.0, 1.0);
            Ok(scene(
                two_class_layout(&mut rng, s, 1.0, blob, ridge),
                Concentration::Smooth,
                None,
            ))
        }
        Preset::Undersampled => {
            let blob = Fluorophore::with_lifetime(BLOB_TAU, 0.5, 1.0, 1.0);
            let ridge = Fluorophore::with_lifetime(RIDGE_TAU, 0.3, 1.0, 1.0);
            Ok(scene(
                two_class_layout(&mut rng, s, 0.5, blob, ridge),
                Concentration::Smooth,
                None,
            ))
        }
        Preset::Rough => {
            // equal ε·Q: same expected brightness for both classes
            let blob = Fluorophore::with_lifetime(BLOB_TAU, 0.5, 1.0, 1.0);
            let ridge = Fluorophore::with_lifetime(RIDGE_TAU, 0.3, 1.0, 0.5 / 0.3);
            Ok(scene(
                two_class_layout(&mut rng, s, 1.0, blob, ridge),
                Concentration::Rough,
                None,
            ))
        }
        Preset::AffineLocal => {
            let min_width = (size / 16).max(2);
            let max_width = (size / 6).max(min_width + 1);
            let mut structures = Vec::new();
            let mut left = 0usize;
            while left < size {
                let remaining = size - left;
                let mut width = rng.random_range(min_width..=max_width).min(remaining);
                if remaining - width < min_width {
                    width = remaining;
                }
                let right = left + width;
                let tau = rng.random_range(1.5..3.5);
                // with gain 1 and ε 1 the intensity is amplitude · Q
                let intensity = (tau - AFFINE_INTERCEPT) / AFFINE_SLOPE;
                let q = 0.5;
                let centre = 0.5 * (left + right - 1) as f64;
                structures.push(Structure {
                    shape: Shape::Ridge {
                        start: (-1.0, centre),
                        end: (s, centre),
                        width: width as f64,
                    },
                    fluorophore: Fluorophore::with_lifetime(tau, q, intensity / q, 1.0),
                });
                left = right;
            }
            Ok(scene(structures, Concentration::Uniform, Some(1.0)))
        }
    }
}

/// Randomly placed ridges first, then blobs drawn on top. `scale` shrinks
/// feature sizes and increases their number.
fn two_class_layout(
    rng: &mut ChaCha8Rng,
    s: f64,
    scale: f64,
    blob: Fluorophore,
    ridge: Fluorophore,
) -> Vec<Structure> {
    let mut out = Vec::new();
    let density = 1.0 / (scale * scale);
    let n_ridges = ((s / 256.0).powi(2) * 7.0 * density).round().max(1.0) as usize;
    let n_blobs = ((s / 256.0).powi(2) * 9.0 * density).round().max(1.0) as usize;
    let ridge_width = (s / 40.0 * scale).max(3.0);
    for _ in 0..n_ridges {
        let start = (
            rng.random_range(0.05 * s..0.95 * s),
            rng.random_range(0.05 * s..0.95 * s),
        );
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let length = rng.random_range(0.25 * s..0.45 * s) * scale.sqrt();
        let end = (
            start.0 + length * angle.sin(),
            start.1 + length * angle.cos(),
        );
        out.push(Structure {
            shape: Shape::Ridge {
                start,
                end,
                width: rng.random_range(ridge_width..1.4 * ridge_width),
            },
            fluorophore: ridge,
        });
    }
    for _ in 0..n_blobs {
        let radius = rng.random_range(0.045 * s..0.075 * s) * scale;
        out.push(Structure {
            shape: Shape::Blob {
                center: (
                    rng.random_range(radius..s - radius),
                    rng.random_range(radius..s - radius),
                ),
                radius,
            },
            fluorophore: blob,
        });
    }
    out
}

/// Fraction of `mask`ed pixels whose predicted lifetime rounds to the same
/// label as the truth, with labels taken as the nearest of `labels`.
pub fn class_accuracy(
    pred: &Array2<f64>,
    truth: &Array2<f64>,
    mask: &Array2<bool>,
    labels: &[f64],
) -> Result<f64> {
    if pred.dim() != truth.dim() || pred.dim() != mask.dim() {
        return Err(Error::shape(
            &[truth.nrows(), truth.ncols()],
            &[pred.nrows(), pred.ncols()],
        ));
    }
    let nearest = |v: f64| {
        labels
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - v).abs().total_cmp(&(b.1 - v).abs()))
            .map(|(k, _)| k)
    };
    let (mut hit, mut n) = (0usize, 0usize);
    for ((&p, &t), &m) in pred.iter().zip(truth.iter()).zip(mask.iter()) {
        if m {
            n += 1;
            if nearest(p) == nearest(t) {
                hit += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidValue("class mask selects no pixels".into()));
    }
    Ok(hit as f64 / n as f64)
}
