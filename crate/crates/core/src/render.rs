//! Composite rendering: lifetime through a colormap, brightness from
//! CLAHE-equalized intensity.

use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::types::{Plane, Role};

const BINS: usize = 256;
const VIRIDIS_CSV: &str = include_str!("../data/viridis.csv");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClaheConfig {
    /// Tile grid as (rows, cols).
    pub tiles: (usize, usize),
    /// Clip limit relative to the uniform bin height.
    pub clip: f64,
}

impl Default for ClaheConfig {
    fn default() -> Self {
        ClaheConfig {
            tiles: (8, 8),
            clip: 2.0,
        }
    }
}

impl ClaheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiles.0 == 0 || self.tiles.1 == 0 {
            return Err(Error::InvalidConfig(
                "CLAHE needs at least one tile per axis".into(),
            ));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "CLAHE clip must be > 0, got {}",
                self.clip
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colormap {
    #[default]
    Viridis,
    Gray,
}

impl Colormap {
    pub fn name(self) -> &'static str {
        match self {
            Colormap::Viridis => "viridis",
            Colormap::Gray => "gray",
        }
    }

    /// The 256-entry RGB table, values in [0, 1].
    pub fn table(self) -> &'static [[f64; 3]] {
        static VIRIDIS: OnceLock<Vec<[f64; 3]>> = OnceLock::new();
        static GRAY: OnceLock<Vec<[f64; 3]>> = OnceLock::new();
        match self {
            Colormap::Viridis => VIRIDIS.get_or_init(|| parse_table(VIRIDIS_CSV)),
            Colormap::Gray => {
                GRAY.get_or_init(|| (0..BINS).map(|k| [k as f64 / 255.0; 3]).collect())
            }
        }
    }

    /// Colour for `t` in [0, 1] (clamped).
    pub fn lookup(self, t: f64) -> [f64; 3] {
        let table = self.table();
        let k = (t.clamp(0.0, 1.0) * (table.len() - 1) as f64).round() as usize;
        table[k]
    }
}

impl FromStr for Colormap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "viridis" => Ok(Colormap::Viridis),
            "gray" | "grey" => Ok(Colormap::Gray),
            _ => Err(Error::InvalidConfig(format!("unknown colormap `{s}`"))),
        }
    }
}

fn parse_table(csv: &str) -> Vec<[f64; 3]> {
    csv.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut it = l
                .split(',')
                .map(|v| v.trim().parse::<f64>().expect("colormap entry"));
            [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
        })
        .collect()
}

/// Contrast-limited adaptive histogram equalization. The input is rescaled
/// to [0, 1] by its own range; tiles that overrun the image read replicated
/// edge pixels. A constant image maps to 0.5 everywhere.
pub fn clahe(intensity: &Plane, cfg: &ClaheConfig) -> Result<Plane> {
    let values = clahe_array(intensity.values(), cfg)?;
    Plane::new(values, Role::Intensity, "dimensionless")
}

pub fn clahe_array(image: &Array2<f64>, cfg: &ClaheConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "CLAHE input contains non-finite values".into(),
        ));
    }
    let (rows, cols) = image.dim();
    let (tr, tc) = cfg.tiles;
    if tr > rows || tc > cols {
        return Err(Error::InvalidConfig(format!(
            "{tr}x{tc} tiles do not fit a {rows}x{cols} image"
        )));
    }
    let lo = image.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = image.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok(Array2::from_elem((rows, cols), 0.5));
    }
    let bins = image.mapv(|v| {
        (((v - lo) / (hi - lo)) * BINS as f64)
            .floor()
            .min((BINS - 1) as f64) as usize
    });
    let th = rows.div_ceil(tr);
    let tw = cols.div_ceil(tc);
    let per_tile = (th * tw) as f64;
    let limit = (cfg.clip * per_tile / BINS as f64).max(1.0);

    let mut maps = vec![[0.0f64; BINS]; tr * tc];
    for ty in 0..tr {
        for tx in 0..tc {
            let mut hist = [0.0f64; BINS];
            for r in ty * th..(ty + 1) * th {
                for c in tx * tw..(tx + 1) * tw {
                    hist[bins[[r.min(rows - 1), c.min(cols - 1)]]] += 1.0;
                }
            }
            let excess: f64 = hist.iter().map(|&h| (h - limit).max(0.0)).sum();
            let share = excess / BINS as f64;
            let map = &mut maps[ty * tc + tx];
            let mut acc = 0.0;
            for (m, &h) in map.iter_mut().zip(&hist) {
                acc += h.min(limit) + share;
                *m = (acc / per_tile).clamp(0.0, 1.0);
            }
        }
    }

    // position of pixel p between tile centres along one axis
    let axis = |p: usize, size: usize, n: usize| -> (usize, usize, f64) {
        let u = (p as f64 + 0.5) / size as f64 - 0.5;
        if u <= 0.0 {
            return (0, 0, 0.0);
        }
        if u >= (n - 1) as f64 {
            return (n - 1, n - 1, 0.0);
        }
        let k = u.floor() as usize;
        (k, k + 1, u - k as f64)
    };
    Ok(Array2::from_shape_fn((rows, cols), |(r, c)| {
        let b = bins[[r, c]];
        let (y0, y1, wy) = axis(r, th, tr);
        let (x0, x1, wx) = axis(c, tw, tc);
        let m = |y: usize, x: usize| maps[y * tc + x][b];
        let top = m(y0, x0) * (1.0 - wx) + m(y0, x1) * wx;
        let bottom = m(y1, x0) * (1.0 - wx) + m(y1, x1) * wx;
        (top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0)
    }))
}

/// RGB composite with channels in [0, 1], shape `(rows, cols, 3)`. Lifetimes
/// are clipped to `tau_range`. Unsampled (NaN) pixels and pixels without
/// photons (intensity <= 0) are black.
pub fn composite(
    tau: &Plane,
    intensity: &Plane,
    colormap: Colormap,
    tau_range: (f64, f64),
    cfg: &ClaheConfig,
) -> Result<Array3<f64>> {
    if tau.shape() != intensity.shape() {
        let (a, b) = (intensity.shape(), tau.shape());
        return Err(Error::shape(&[a.0, a.1], &[b.0, b.1]));
    }
    let (lo, hi) = tau_range;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::InvalidConfig(format!(
            "invalid lifetime range {lo},{hi}"
        )));
    }
    let weight = clahe_array(intensity.values(), cfg)?;
    let (rows, cols) = tau.shape();
    let mut out = Array3::zeros((rows, cols, 3));
    for ((r, c), &t) in tau.values().indexed_iter() {
        if t.is_nan() || !(intensity.values()[[r, c]] > 0.0) {
            continue;
        }
        let rgb = colormap.lookup((t - lo) / (hi - lo));
        for k in 0..3 {
            out[[r, c, k]] = rgb[k] * weight[[r, c]];
        }
    }
    Ok(out)
}

/// 8-bit RGB PNG bytes.
pub fn encode_png(rgb: &Array3<f64>) -> Result<Vec<u8>> {
    let (rows, cols, ch) = rgb.dim();
    if ch != 3 {
        return Err(Error::shape(&[rows, cols, 3], &[rows, cols, ch]));
    }
    let pixels: Vec<u8> = rgb
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut bytes = Vec::new();
    PngEncoder::new(&mut bytes).write_image(
        &pixels,
        cols as u32,
        rows as u32,
        ExtendedColorType::Rgb8,
    )?;
    Ok(bytes)
}

pub fn write_png(path: impl AsRef<Path>, rgb: &Array3<f64>) -> Result<()> {
    io::write_file(path.as_ref(), &encode_png(rgb)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plane(v: Array2<f64>) -> Plane {
        Plane::new(v, Role::Intensity, "").unwrap()
    }

    #[test]
    fn viridis_table_is_complete_and_ordered_in_lightness() {
        let t = Colormap::Viridis.table();
        assert_eq!(t.len(), 256);
        assert!((t[0][0] - 0.267004).abs() < 1e-9 && (t[255][1] - 0.906157).abs() < 1e-9);
        let luma = |c: &[f64; 3]| 0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2];
        assert!(t.windows(2).all(|w| luma(&w[1]) > luma(&w[0])));
    }

    #[test]
    fn constant_image_is_half() {
        let out = clahe_array(&Array2::from_elem((20, 30), 7.0), &ClaheConfig::default()).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn uniform_histogram_single_tile_is_rank_transform() {
        // 256 distinct levels, one per bin, shuffled over a 16x16 image
        let mut levels: Vec<usize> = (0..256).collect();
        for k in 0..256 {
            levels.swap(k, (k * 97 + 13) % 256);
        }
        let img = Array2::from_shape_fn((16, 16), |(r, c)| levels[r * 16 + c] as f64);
        let cfg = ClaheConfig {
            tiles: (1, 1),
            clip: 1e6,
        };
        let out = clahe_array(&img, &cfg).unwrap();
        for (&v, &o) in img.iter().zip(out.iter()) {
            let rank = (v + 1.0) / 256.0;
            assert!(
                (o - rank).abs() <= 1.0 / 256.0 + 1e-12,
                "{v}: {o} vs {rank}"
            );
        }
    }

    #[test]
    fn clipping_flattens_the_mapping() {
        // half the pixels at one level: without clipping that level jumps to 0.5
        let img = Array2::from_shape_fn(
            (16, 16),
            |(r, c)| if r < 8 { 0.0 } else { (r * 16 + c) as f64 },
        );
        let free = clahe_array(
            &img,
            &ClaheConfig {
                tiles: (1, 1),
                clip: 1e6,
            },
        )
        .unwrap();
        let clipped = clahe_array(
            &img,
            &ClaheConfig {
                tiles: (1, 1),
                clip: 2.0,
            },
        )
        .unwrap();
        assert!((free[[0, 0]] - 0.5).abs() < 1e-12);
        assert!(clipped[[0, 0]] < 0.1);
    }

    #[test]
    fn tiles_that_overrun_are_accepted() {
        let img = Array2::from_shape_fn((37, 29), |(r, c)| ((r * 7 + c * 3) % 23) as f64);
        let out = clahe_array(&img, &ClaheConfig::default()).unwrap();
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(clahe_array(
            &img,
            &ClaheConfig {
                tiles: (40, 2),
                clip: 2.0
            }
        )
        .is_err());
        assert!(clahe_array(
            &img,
            &ClaheConfig {
                tiles: (2, 2),
                clip: 0.0
            }
        )
        .is_err());
    }

    #[test]
    fn zero_intensity_is_black() {
        let tau = Plane::new(Array2::from_elem((10, 10), 2.0), Role::Lifetime, "ns").unwrap();
        let cfg = ClaheConfig {
            tiles: (2, 2),
            clip: 2.0,
        };
        let rgb = composite(
            &tau,
            &plane(Array2::zeros((10, 10))),
            Colormap::Viridis,
            (0.0, 4.0),
            &cfg,
        )
        .unwrap();
        assert!(rgb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_tau_keeps_hue_and_tracks_clahe() {
        let tau = Plane::new(Array2::from_elem((16, 16), 2.0), Role::Lifetime, "ns").unwrap();
        let i = plane(Array2::from_shape_fn((16, 16), |(r, c)| {
            (1 + r * 16 + c) as f64
        }));
        let cfg = ClaheConfig {
            tiles: (2, 2),
            clip: 2.0,
        };
        let rgb = composite(&tau, &i, Colormap::Viridis, (0.0, 4.0), &cfg).unwrap();
        let w = clahe_array(i.values(), &cfg).unwrap();
        let base = Colormap::Viridis.lookup(0.5);
        for ((r, c), &wv) in w.indexed_iter() {
            for k in 0..3 {
                assert_eq!(rgb[[r, c, k]], base[k] * wv);
            }
        }
    }

    #[test]
    fn shape_and_range_errors() {
        let tau = Plane::new(Array2::from_elem((10, 10), 2.0), Role::Lifetime, "ns").unwrap();
        let i = plane(Array2::zeros((10, 11)));
        assert!(matches!(
            composite(
                &tau,
                &i,
                Colormap::Gray,
                (0.0, 1.0),
                &ClaheConfig::default()
            ),
            Err(Error::ShapeMismatch { .. })
        ));
        let i = plane(Array2::zeros((10, 10)));
        assert!(composite(
            &tau,
            &i,
            Colormap::Gray,
            (1.0, 1.0),
            &ClaheConfig::default()
        )
        .is_err());
    }

    #[test]
    fn png_round_trip() {
        let rgb = Array3::from_shape_fn((5, 7, 3), |(r, c, k)| ((r + c + k) % 4) as f64 / 3.0);
        let bytes = encode_png(&rgb).unwrap();
        let back = image::load_from_memory(&bytes).unwrap().to_rgb8();
        assert_eq!(back.dimensions(), (7, 5));
        assert_eq!(back.get_pixel(1, 0).0, [85, 170, 255]);
    }

    proptest! {
        #[test]
        fn clahe_output_in_unit_interval(
            v in prop::collection::vec(-1e3f64..1e3, 12 * 15),
            tr in 1usize..6, tc in 1usize..6, clip in 0.1f64..10.0,
        ) {
            let img = Array2::from_shape_vec((12, 15), v).unwrap();
            let out = clahe_array(&img, &ClaheConfig { tiles: (tr, tc), clip }).unwrap();
            prop_assert!(out.iter().all(|x| (0.0..=1.0).contains(x)));
        }

        #[test]
        fn hue_depends_only_on_tau(
            t in prop::collection::vec(0.0f64..5.0, 64),
            i in prop::collection::vec(0.0f64..100.0, 64),
        ) {
            let tau = Plane::new(Array2::from_shape_vec((8, 8), t).unwrap(), Role::Lifetime, "ns").unwrap();
            let rgb = composite(&tau, &plane(Array2::from_shape_vec((8, 8), i).unwrap()), Colormap::Viridis, (0.5, 4.0), &ClaheConfig { tiles: (2, 2), clip: 2.0 }).unwrap();
            for ((r, c), &tv) in tau.values().indexed_iter() {
                let base = Colormap::Viridis.lookup((tv - 0.5) / 3.5);
                let w = rgb[[r, c, 0]] / base[0];
                prop_assert!((0.0..=1.0 + 1e-12).contains(&w));
                for k in 0..3 {
                    prop_assert!((rgb[[r, c, k]] - w * base[k]).abs() < 1e-12);
                }
            }
        }
    }
}
