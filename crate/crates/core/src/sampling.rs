//! Point decimation between the HR and LR grids, its adjoint, and the
//! bilinear baseline.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{Plane, SamplingMap};

fn check_shape(actual: (usize, usize), expected: (usize, usize)) -> Result<()> {
    if actual != expected {
        return Err(Error::shape(
            &[expected.0, expected.1],
            &[actual.0, actual.1],
        ));
    }
    Ok(())
}

/// `out[i, j] = hr[offset + factor * (i, j)]`.
pub fn decimate_array(hr: &Array2<f64>, map: &SamplingMap) -> Result<Array2<f64>> {
    check_shape(hr.dim(), map.hr_shape())?;
    Ok(Array2::from_shape_fn(map.lr_shape(), |(i, j)| {
        hr[map.hr_position(i, j)]
    }))
}

/// Scatters LR values onto a zero HR grid (the transpose of decimation).
pub fn decimate_adjoint_array(lr: &Array2<f64>, map: &SamplingMap) -> Result<Array2<f64>> {
    check_shape(lr.dim(), map.lr_shape())?;
    let mut hr = Array2::zeros(map.hr_shape());
    for ((i, j), &v) in lr.indexed_iter() {
        hr[map.hr_position(i, j)] = v;
    }
    Ok(hr)
}

pub fn decimate(hr: &Plane, map: &SamplingMap) -> Result<Plane> {
    Plane::new(decimate_array(hr.values(), map)?, hr.role(), hr.units())
}

pub fn decimate_adjoint(lr: &Plane, map: &SamplingMap) -> Result<Plane> {
    let values = decimate_adjoint_array(lr.values(), map)?;
    Plane::new(values, lr.role(), lr.units())
}

/// Bilinear interpolation of LR samples placed at their HR positions; HR
/// pixels outside the sampled hull take the nearest edge value.
pub fn bilinear_array(lr: &Array2<f64>, map: &SamplingMap) -> Result<Array2<f64>> {
    check_shape(lr.dim(), map.lr_shape())?;
    if lr.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue(
            "bilinear upsampling needs a fully sampled LR plane".into(),
        ));
    }
    let (m, n) = map.lr_shape();
    let (fr, fc) = map.factor();
    let (or, oc) = map.offset();
    let axis = |p: usize, off: usize, f: usize, len: usize| -> (usize, usize, f64) {
        let u = (p as f64 - off as f64) / f as f64;
        let u = u.clamp(0.0, (len - 1) as f64);
        let i0 = (u.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, u - i0 as f64)
    };
    let rows: Vec<_> = (0..map.hr_shape().0).map(|r| axis(r, or, fr, m)).collect();
    let cols: Vec<_> = (0..map.hr_shape().1).map(|c| axis(c, oc, fc, n)).collect();
    Ok(Array2::from_shape_fn(map.hr_shape(), |(r, c)| {
        let (r0, r1, wr) = rows[r];
        let (c0, c1, wc) = cols[c];
        let top = lr[[r0, c0]] * (1.0 - wc) + lr[[r0, c1]] * wc;
        let bottom = lr[[r1, c0]] * (1.0 - wc) + lr[[r1, c1]] * wc;
        top * (1.0 - wr) + bottom * wr
    }))
}

pub fn bilinear_upsample(lr: &Plane, map: &SamplingMap) -> Result<Plane> {
    Plane::new(bilinear_array(lr.values(), map)?, lr.role(), lr.units())
}
