//! `fbin` and CSV serialization for planes and datacubes.
//!
//! `fbin` layout: the 8-byte magic `SISIFBIN`, a little-endian `u32` header
//! length, a UTF-8 JSON header ([`FbinHeader`]) and a raw little-endian
//! row-major payload. Planes use `float32`; datacubes use `uint16` when every
//! count fits, `float32` otherwise; predictor weights use `float64`.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Datacube, Plane, Role};

pub const MAGIC: &[u8; 8] = b"SISIFBIN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Float32,
    Float64,
    Uint16,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::Float32 => 4,
            Dtype::Float64 => 8,
            Dtype::Uint16 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    #[default]
    Plane,
    Datacube,
    Predictor,
}

/// JSON header shared by every `fbin` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FbinHeader {
    pub kind: Kind,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    /// Always `"little"`.
    pub byte_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
    /// Set when a lifetime plane carries `NaN` markers for unmeasured pixels.
    #[serde(default)]
    pub has_unsampled: bool,
    /// Datacube time-bin width in nanoseconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0_bin: Option<usize>,
    /// Free-form metadata (predictor architecture, normalization constants).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl FbinHeader {
    pub fn new(kind: Kind, shape: Vec<usize>, dtype: Dtype) -> Self {
        FbinHeader {
            kind,
            shape,
            dtype,
            byte_order: "little".to_string(),
            role: None,
            units: None,
            has_unsampled: false,
            bin_width: None,
            t0_bin: None,
            meta: None,
        }
    }

    fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Serializes a header and payload into `fbin` bytes.
pub fn encode_fbin(header: &FbinHeader, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let len =
        u32::try_from(json.len()).map_err(|_| Error::Format("header longer than 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Splits `fbin` bytes into header and payload, checking the payload size.
pub fn decode_fbin(bytes: &[u8]) -> Result<(FbinHeader, &[u8])> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Format("missing SISIFBIN magic".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(Error::Format(format!(
            "header length {len} exceeds file size"
        )));
    }
    let header: FbinHeader = serde_json::from_slice(&body[..len])?;
    if header.byte_order != "little" {
        return Err(Error::Format(format!(
            "unsupported byte order `{}`",
            header.byte_order
        )));
    }
    let payload = &body[len..];
    let expected = header.element_count() * header.dtype.size();
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "header/payload size mismatch: shape {:?} of {:?} needs {expected} bytes, payload has {}",
            header.shape,
            header.dtype,
            payload.len()
        )));
    }
    Ok((header, payload))
}

fn decode_values(dtype: Dtype, payload: &[u8]) -> Vec<f64> {
    match dtype {
        Dtype::Float32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        Dtype::Float64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        Dtype::Uint16 => payload
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
    }
}

pub(crate) fn f64_payload(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn f64_values(payload: &[u8]) -> Vec<f64> {
    decode_values(Dtype::Float64, payload)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// On-disk plane formats. CSV carries no metadata, so reading one needs the
/// role to assign.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaneFormat {
    Fbin,
    Csv { role: Role },
}

impl PlaneFormat {
    /// Picks the format from the file extension (`.csv` or anything else).
    pub fn from_path(path: &Path, csv_role: Role) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => PlaneFormat::Csv { role: csv_role },
            _ => PlaneFormat::Fbin,
        }
    }
}

pub fn encode_plane(plane: &Plane) -> Result<Vec<u8>> {
    let (r, c) = plane.shape();
    let mut header = FbinHeader::new(Kind::Plane, vec![r, c], Dtype::Float32);
    header.role = Some(plane.role().as_str().to_string());
    header.units = Some(plane.units().to_string());
    header.has_unsampled = plane.has_unsampled();
    let payload: Vec<u8> = plane
        .values()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    encode_fbin(&header, &payload)
}

pub fn decode_plane(bytes: &[u8]) -> Result<Plane> {
    let (header, payload) = decode_fbin(bytes)?;
    if header.kind != Kind::Plane || header.shape.len() != 2 {
        return Err(Error::Format(format!(
            "expected a 2-D plane, found {:?} with shape {:?}",
            header.kind, header.shape
        )));
    }
    let role = Role::from_str(header.role.as_deref().unwrap_or("intensity"))?;
    let values = decode_values(header.dtype, payload);
    let has_nan = values.iter().any(|v| !v.is_finite());
    if has_nan && !(role == Role::Lifetime && header.has_unsampled) {
        return Err(Error::Format(format!(
            "non-finite values in {role} plane without the has_unsampled flag"
        )));
    }
    let arr = Array2::from_shape_vec((header.shape[0], header.shape[1]), values)
        .expect("payload length checked against shape");
    let units = header
        .units
        .unwrap_or_else(|| role.default_units().to_string());
    Plane::new(arr, role, units)
}

pub fn plane_to_csv(plane: &Plane) -> String {
    let mut out = String::new();
    for row in plane.values().rows() {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                if v.is_nan() {
                    "nan".to_string()
                } else {
                    format!("{v}")
                }
            })
            .collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn plane_from_csv(text: &str, role: Role) -> Result<Plane> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| {
                let tok = tok.trim();
                if tok.eq_ignore_ascii_case("nan") {
                    Ok(f64::NAN)
                } else {
                    tok.parse::<f64>().map_err(|_| {
                        Error::Format(format!("line {}: bad number `{tok}`", lineno + 1))
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Format(format!(
                    "line {}: {} values, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format("empty CSV plane".into()));
    }
    let (r, c) = (rows.len(), rows[0].len());
    let arr = Array2::from_shape_vec((r, c), rows.into_iter().flatten().collect())
        .expect("rows have equal length");
    Plane::with_role(arr, role)
}

pub fn read_plane(path: impl AsRef<Path>, format: PlaneFormat) -> Result<Plane> {
    let path = path.as_ref();
    match format {
        PlaneFormat::Fbin => decode_plane(&read_bytes(path)?),
        PlaneFormat::Csv { role } => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            plane_from_csv(&text, role)
        }
    }
}

pub fn write_plane(plane: &Plane, path: impl AsRef<Path>, format: PlaneFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        PlaneFormat::Fbin => write_bytes(path, &encode_plane(plane)?),
        PlaneFormat::Csv { .. } => write_bytes(path, plane_to_csv(plane).as_bytes()),
    }
}

pub fn encode_datacube(cube: &Datacube) -> Result<Vec<u8>> {
    let (r, c, t) = cube.shape();
    let fits_u16 = cube
        .counts()
        .iter()
        .all(|&v| v.fract() == 0.0 && v <= u16::MAX as f64);
    let dtype = if fits_u16 {
        Dtype::Uint16
    } else {
        Dtype::Float32
    };
    let mut header = FbinHeader::new(Kind::Datacube, vec![r, c, t], dtype);
    header.units = Some("photon counts".into());
    header.bin_width = Some(cube.bin_width());
    header.t0_bin = cube.t0_bin();
    let payload: Vec<u8> = if fits_u16 {
        cube.counts()
            .iter()
            .flat_map(|&v| (v as u16).to_le_bytes())
            .collect()
    } else {
        cube.counts()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect()
    };
    encode_fbin(&header, &payload)
}

pub fn decode_datacube(bytes: &[u8]) -> Result<Datacube> {
    let (header, payload) = decode_fbin(bytes)?;
    if header.kind != Kind::Datacube || header.shape.len() != 3 {
        return Err(Error::Format(format!(
            "expected a 3-D datacube, found {:?} with shape {:?}",
            header.kind, header.shape
        )));
    }
    let bin_width = header
        .bin_width
        .ok_or_else(|| Error::Format("datacube header lacks bin_width".into()))?;
    let values = decode_values(header.dtype, payload);
    let counts =
        Array3::from_shape_vec((header.shape[0], header.shape[1], header.shape[2]), values)
            .expect("payload length checked against shape");
    Datacube::new(counts, bin_width, header.t0_bin)
}

pub fn read_datacube(path: impl AsRef<Path>) -> Result<Datacube> {
    decode_datacube(&read_bytes(path.as_ref())?)
}

pub fn write_datacube(cube: &Datacube, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_datacube(cube)?)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    write_bytes(path, bytes)
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    read_bytes(path)
}
