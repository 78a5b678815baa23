//! Shared data model: time-resolved datacubes, 2-D planes and the sampling
//! geometry that ties the low-resolution lifetime grid to the high-resolution
//! intensity grid.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a [`Plane`] holds. Validation rules depend on the role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Intensity,
    Lifetime,
    Prior,
    Weight,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Intensity => "intensity",
            Role::Lifetime => "lifetime",
            Role::Prior => "prior",
            Role::Weight => "weight",
        }
    }

    /// Default units tag used when none is given.
    pub fn default_units(self) -> &'static str {
        match self {
            Role::Intensity => "photon counts",
            Role::Lifetime | Role::Prior => "ns",
            Role::Weight => "dimensionless",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intensity" => Ok(Role::Intensity),
            "lifetime" => Ok(Role::Lifetime),
            "prior" => Ok(Role::Prior),
            "weight" => Ok(Role::Weight),
            other => Err(Error::UnknownRole(other.to_string())),
        }
    }
}

/// A 2-D scalar image with a role tag and a free-text units tag.
///
/// Values are held in `f64`; files store `f32`. Lifetime planes may carry
/// `NaN` entries, which mark pixels that were never measured (as opposed to a
/// measured lifetime of zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    values: Array2<f64>,
    role: Role,
    units: String,
}

impl Plane {
    /// Builds a plane after checking the role invariants.
    pub fn new(values: Array2<f64>, role: Role, units: impl Into<String>) -> Result<Self> {
        validate_values(&values, role)?;
        Ok(Plane {
            values,
            role,
            units: units.into(),
        })
    }

    /// Builds a plane using the role's default units.
    pub fn with_role(values: Array2<f64>, role: Role) -> Result<Self> {
        Self::new(values, role, role.default_units())
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn units(&self) -> &str {
        &self.units
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn has_unsampled(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    /// Same values under a different role, re-validated.
    pub fn retag(self, role: Role) -> Result<Self> {
        Plane::new(self.values, role, role.default_units())
    }
}

fn validate_values(values: &Array2<f64>, role: Role) -> Result<()> {
    let (rows, cols) = values.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidValue(
            "plane must have positive dimensions".into(),
        ));
    }
    for (idx, &v) in values.indexed_iter() {
        let ok = match role {
            Role::Lifetime => v.is_nan() || (v.is_finite() && v >= 0.0),
            Role::Prior | Role::Intensity => v.is_finite() && v >= 0.0,
            Role::Weight => (0.0..=1.0).contains(&v),
        };
        if !ok {
            return Err(Error::InvalidValue(format!(
                "{role} plane has invalid value {v} at {idx:?}"
            )));
        }
    }
    Ok(())
}

/// Time-resolved photon-count histogram indexed `(row, col, time bin)`.
///
/// Counts are stored as `f64` so that expected-value (noiseless) cubes can be
/// represented alongside integer Poisson realizations.
#[derive(Debug, Clone, PartialEq)]
pub struct Datacube {
    counts: Array3<f64>,
    bin_width: f64,
    t0_bin: Option<usize>,
}

impl Datacube {
    /// `bin_width` is in nanoseconds.
    pub fn new(counts: Array3<f64>, bin_width: f64, t0_bin: Option<usize>) -> Result<Self> {
        let (r, c, t) = counts.dim();
        if r == 0 || c == 0 || t == 0 {
            return Err(Error::InvalidValue(
                "datacube dimensions must be positive".into(),
            ));
        }
        if !(bin_width.is_finite() && bin_width > 0.0) {
            return Err(Error::InvalidValue(format!(
                "bin width must be > 0, got {bin_width}"
            )));
        }
        if let Some(bad) = counts.iter().find(|&&v| !(v.is_finite() && v >= 0.0)) {
            return Err(Error::InvalidValue(format!(
                "datacube count {bad} is not >= 0"
            )));
        }
        if let Some(t0) = t0_bin {
            if t0 >= t {
                return Err(Error::InvalidValue(format!(
                    "t0 bin {t0} outside {t} time bins"
                )));
            }
        }
        Ok(Datacube {
            counts,
            bin_width,
            t0_bin,
        })
    }

    pub fn counts(&self) -> &Array3<f64> {
        &self.counts
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn t0_bin(&self) -> Option<usize> {
        self.t0_bin
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.counts.dim()
    }
}

/// Sums a datacube along time, giving the photon-count intensity image.
pub fn integrate_time(cube: &Datacube) -> Plane {
    let values = cube.counts.sum_axis(Axis(2));
    Plane {
        values,
        role: Role::Intensity,
        units: Role::Intensity.default_units().to_string(),
    }
}

/// Geometry of the decimation operator: LR sample `(i, j)` sits on HR pixel
/// `(offset.0 + factor.0 * i, offset.1 + factor.1 * j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingMap {
    factor: (usize, usize),
    offset: (usize, usize),
    lr_shape: (usize, usize),
    hr_shape: (usize, usize),
}

impl SamplingMap {
    pub fn new(
        factor: (usize, usize),
        offset: (usize, usize),
        lr_shape: (usize, usize),
        hr_shape: (usize, usize),
    ) -> Result<Self> {
        if factor.0 == 0 || factor.1 == 0 {
            return Err(Error::InvalidConfig("sampling factor must be >= 1".into()));
        }
        if lr_shape.0 == 0 || lr_shape.1 == 0 || hr_shape.0 == 0 || hr_shape.1 == 0 {
            return Err(Error::InvalidConfig(
                "sampling shapes must be positive".into(),
            ));
        }
        let last_r = offset.0 + factor.0 * (lr_shape.0 - 1);
        let last_c = offset.1 + factor.1 * (lr_shape.1 - 1);
        if last_r >= hr_shape.0 || last_c >= hr_shape.1 {
            return Err(Error::InvalidConfig(format!(
                "LR grid {lr_shape:?} at factor {factor:?} offset {offset:?} does not fit in HR grid {hr_shape:?}"
            )));
        }
        Ok(SamplingMap {
            factor,
            offset,
            lr_shape,
            hr_shape,
        })
    }

    /// Corner-aligned map with the largest LR grid that fits in `hr_shape`.
    pub fn for_hr(hr_shape: (usize, usize), factor: usize) -> Result<Self> {
        Self::with_offset(hr_shape, (factor, factor), (0, 0))
    }

    pub fn with_offset(
        hr_shape: (usize, usize),
        factor: (usize, usize),
        offset: (usize, usize),
    ) -> Result<Self> {
        if factor.0 == 0 || factor.1 == 0 {
            return Err(Error::InvalidConfig("sampling factor must be >= 1".into()));
        }
        if offset.0 >= hr_shape.0 || offset.1 >= hr_shape.1 {
            return Err(Error::InvalidConfig(format!(
                "offset {offset:?} outside HR grid {hr_shape:?}"
            )));
        }
        let lr = (
            (hr_shape.0 - 1 - offset.0) / factor.0 + 1,
            (hr_shape.1 - 1 - offset.1) / factor.1 + 1,
        );
        Self::new(factor, offset, lr, hr_shape)
    }

    pub fn factor(&self) -> (usize, usize) {
        self.factor
    }

    pub fn offset(&self) -> (usize, usize) {
        self.offset
    }

    pub fn lr_shape(&self) -> (usize, usize) {
        self.lr_shape
    }

    pub fn hr_shape(&self) -> (usize, usize) {
        self.hr_shape
    }

    /// HR pixel holding LR sample `(i, j)`.
    pub fn hr_position(&self, i: usize, j: usize) -> (usize, usize) {
        (
            self.offset.0 + self.factor.0 * i,
            self.offset.1 + self.factor.1 * j,
        )
    }

    /// LR sample whose block owns HR pixel `(r, c)`; pixels before the offset
    /// or past the last block belong to the nearest edge block.
    pub fn owner(&self, r: usize, c: usize) -> (usize, usize) {
        let own = |p: usize, off: usize, f: usize, n: usize| {
            if p < off {
                0
            } else {
                ((p - off) / f).min(n - 1)
            }
        };
        (
            own(r, self.offset.0, self.factor.0, self.lr_shape.0),
            own(c, self.offset.1, self.factor.1, self.lr_shape.1),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    #[test]
    fn integrate_all_ones() {
        let cube = Datacube::new(Array3::ones((2, 2, 3)), 0.1, None).unwrap();
        let plane = integrate_time(&cube);
        assert_eq!(plane.values(), &Array2::from_elem((2, 2), 3.0));
        assert_eq!(plane.role(), Role::Intensity);
    }

    #[test]
    fn integrate_single_photon() {
        let mut counts = Array3::zeros((2, 2, 8));
        counts[[0, 0, 5]] = 1.0;
        let cube = Datacube::new(counts, 0.1, None).unwrap();
        assert_eq!(
            integrate_time(&cube).values(),
            &array![[1.0, 0.0], [0.0, 0.0]]
        );
    }

    #[test]
    fn datacube_rejects_bad_input() {
        assert!(Datacube::new(Array3::zeros((0, 2, 2)), 0.1, None).is_err());
        assert!(Datacube::new(Array3::zeros((1, 2, 2)), 0.0, None).is_err());
        let mut counts = Array3::zeros((1, 1, 2));
        counts[[0, 0, 1]] = -1.0;
        assert!(Datacube::new(counts, 0.1, None).is_err());
        assert!(Datacube::new(Array3::zeros((1, 1, 2)), 0.1, Some(2)).is_err());
    }

    #[test]
    fn plane_role_invariants() {
        assert!(Plane::with_role(array![[0.5, f64::NAN]], Role::Lifetime).is_ok());
        assert!(Plane::with_role(array![[0.5, f64::NAN]], Role::Prior).is_err());
        assert!(Plane::with_role(array![[-0.1]], Role::Lifetime).is_err());
        assert!(Plane::with_role(array![[1.5]], Role::Weight).is_err());
        assert!(Plane::with_role(array![[0.0, 1.0]], Role::Weight).is_ok());
        assert!("bogus".parse::<Role>().is_err());
    }

    #[test]
    fn sampling_map_geometry() {
        let map = SamplingMap::for_hr((512, 512), 16).unwrap();
        assert_eq!(map.lr_shape(), (32, 32));
        assert!(SamplingMap::new((2, 2), (1, 0), (4, 4), (8, 8)).is_ok());
        assert!(SamplingMap::new((2, 2), (1, 0), (4, 4), (7, 8)).is_err());
        assert!(SamplingMap::new((0, 1), (0, 0), (1, 1), (8, 8)).is_err());
        let map = SamplingMap::new((4, 4), (1, 1), (2, 2), (9, 9)).unwrap();
        assert_eq!(map.owner(0, 0), (0, 0));
        assert_eq!(map.owner(5, 8), (1, 1));
        assert_eq!(map.hr_position(1, 1), (5, 5));
    }

    proptest! {
        #[test]
        fn integrate_is_linear(
            a in proptest::collection::vec(0u32..50, 24),
            b in proptest::collection::vec(0u32..50, 24),
        ) {
            let to_cube = |v: &[u32]| {
                let counts = Array3::from_shape_vec((2, 3, 4), v.iter().map(|&x| x as f64).collect()).unwrap();
                Datacube::new(counts, 0.05, None).unwrap()
            };
            let (ca, cb) = (to_cube(&a), to_cube(&b));
            let sum = Datacube::new(ca.counts() + cb.counts(), 0.05, None).unwrap();
            let lhs = integrate_time(&sum);
            let rhs = integrate_time(&ca).values() + integrate_time(&cb).values();
            prop_assert_eq!(lhs.values(), &rhs);
        }
    }
}
