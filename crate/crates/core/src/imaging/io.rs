//! On-disk array container and dataset directories.
//!
//! Each array lives in its own file: a JSON header padded with spaces to a
//! multiple of 64 bytes (the last header byte is `\n`), followed by the raw
//! little-endian interleaved `(re, im)` payload in row-major order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CoilMaps, ComplexImage, KSpaceData, MaskKind, SamplingMask};
use crate::scalar::Dtype;
use crate::Real;

pub const MAGIC: &str = "MOLK1";
const HEADER_ALIGN: usize = 64;
const MAX_HEADER: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported container version {0:?}")]
    UnsupportedVersion(String),
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("payload length mismatch: header implies {expected} bytes, found {actual}")]
    PayloadLengthMismatch { expected: usize, actual: usize },
    #[error("role mismatch: expected {expected:?}, found {actual:?}")]
    RoleMismatch { expected: Role, actual: Role },
    #[error("invalid contents: {0}")]
    InvalidContents(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DatasetError {
    /// Stable machine-readable code for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            DatasetError::MalformedHeader(_) => "E_HEADER",
            DatasetError::UnsupportedVersion(_) => "E_VERSION",
            DatasetError::UnsupportedDtype(_) => "E_DTYPE",
            DatasetError::PayloadLengthMismatch { .. } => "E_PAYLOAD",
            DatasetError::RoleMismatch { .. } => "E_ROLE",
            DatasetError::InvalidContents(_) => "E_CONTENTS",
            DatasetError::Io { .. } => "E_IO",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Image,
    Kspace,
    Maps,
    Mask,
    Weights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub magic: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub role: Role,
}

/// Serialises one array into container bytes using `T`'s native dtype.
pub fn encode_array<T: Real>(role: Role, shape: &[usize], data: &[Complex<T>]) -> Vec<u8> {
    encode_with_dtype(role, shape, data, T::DTYPE)
}

fn encode_with_dtype<T: Real>(
    role: Role,
    shape: &[usize],
    data: &[Complex<T>],
    dtype: Dtype,
) -> Vec<u8> {
    let header = ArrayHeader {
        magic: MAGIC.to_string(),
        dtype: dtype.as_str().to_string(),
        shape: shape.to_vec(),
        role,
    };
    let mut bytes = serde_json::to_vec(&header).expect("header serialises");
    let padded = (bytes.len() + 1).div_ceil(HEADER_ALIGN) * HEADER_ALIGN;
    bytes.resize(padded - 1, b' ');
    bytes.push(b'\n');
    bytes.reserve(data.len() * dtype.element_bytes());
    for z in data {
        match dtype {
            Dtype::C64 => {
                bytes.extend_from_slice(&(z.re.as_f64() as f32).to_le_bytes());
                bytes.extend_from_slice(&(z.im.as_f64() as f32).to_le_bytes());
            }
            Dtype::C128 => {
                bytes.extend_from_slice(&z.re.as_f64().to_le_bytes());
                bytes.extend_from_slice(&z.im.as_f64().to_le_bytes());
            }
        }
    }
    bytes
}

/// Parses container bytes, converting the payload to `T`.
pub fn decode_array<T: Real>(bytes: &[u8]) -> Result<(ArrayHeader, Vec<Complex<T>>), DatasetError> {
    let end = bytes
        .iter()
        .take(MAX_HEADER)
        .position(|&b| b == b'\n')
        .ok_or_else(|| DatasetError::MalformedHeader("no header terminator".into()))?;
    let header_len = end + 1;
    if header_len % HEADER_ALIGN != 0 {
        return Err(DatasetError::MalformedHeader(format!(
            "header length {header_len} is not a multiple of {HEADER_ALIGN}"
        )));
    }
    let value: serde_json::Value = serde_json::from_slice(&bytes[..end])
        .map_err(|e| DatasetError::MalformedHeader(e.to_string()))?;
    let magic = value
        .get("magic")
        .and_then(|m| m.as_str())
        .ok_or_else(|| DatasetError::MalformedHeader("missing magic".into()))?;
    if magic != MAGIC {
        return Err(if magic.starts_with("MOLK") {
            DatasetError::UnsupportedVersion(magic.to_string())
        } else {
            DatasetError::MalformedHeader(format!("bad magic {magic:?}"))
        });
    }
    let header: ArrayHeader =
        serde_json::from_value(value).map_err(|e| DatasetError::MalformedHeader(e.to_string()))?;
    let dtype =
        Dtype::parse(&header.dtype).ok_or_else(|| DatasetError::UnsupportedDtype(header.dtype.clone()))?;
    let count: usize = header.shape.iter().product();
    let payload = &bytes[header_len..];
    let expected = count * dtype.element_bytes();
    if payload.len() != expected {
        return Err(DatasetError::PayloadLengthMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let data = match dtype {
        Dtype::C64 => payload
            .chunks_exact(8)
            .map(|c| {
                let re = f32::from_le_bytes(c[0..4].try_into().unwrap());
                let im = f32::from_le_bytes(c[4..8].try_into().unwrap());
                Complex::new(T::lit(re as f64), T::lit(im as f64))
            })
            .collect(),
        Dtype::C128 => payload
            .chunks_exact(16)
            .map(|c| {
                let re = f64::from_le_bytes(c[0..8].try_into().unwrap());
                let im = f64::from_le_bytes(c[8..16].try_into().unwrap());
                Complex::new(T::lit(re), T::lit(im))
            })
            .collect(),
    };
    Ok((header, data))
}

pub fn write_array<T: Real>(
    path: &Path,
    role: Role,
    shape: &[usize],
    data: &[Complex<T>],
) -> Result<(), DatasetError> {
    write_bytes(path, &encode_array(role, shape, data))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

pub fn read_array<T: Real>(path: &Path) -> Result<(ArrayHeader, Vec<Complex<T>>), DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_array(&bytes)
}

fn read_role<T: Real>(path: &Path, role: Role) -> Result<(Vec<usize>, Vec<Complex<T>>), DatasetError> {
    let (header, data) = read_array(path)?;
    if header.role != role {
        return Err(DatasetError::RoleMismatch {
            expected: role,
            actual: header.role,
        });
    }
    Ok((header.shape, data))
}

pub fn save_image<T: Real>(path: &Path, img: &ComplexImage<T>) -> Result<(), DatasetError> {
    write_array(path, Role::Image, img.shape(), img.data())
}

pub fn load_image<T: Real>(path: &Path) -> Result<ComplexImage<T>, DatasetError> {
    let (shape, data) = read_role(path, Role::Image)?;
    ComplexImage::from_vec(shape, data).map_err(|e| DatasetError::InvalidContents(e.to_string()))
}

pub fn save_kspace<T: Real>(path: &Path, b: &KSpaceData<T>) -> Result<(), DatasetError> {
    write_array(path, Role::Kspace, b.shape(), b.data())
}

pub fn load_kspace<T: Real>(path: &Path, noise_sigma: T) -> Result<KSpaceData<T>, DatasetError> {
    let (shape, data) = read_role(path, Role::Kspace)?;
    KSpaceData::from_vec(shape, data, noise_sigma)
        .map_err(|e| DatasetError::InvalidContents(e.to_string()))
}

pub fn save_maps<T: Real>(path: &Path, maps: &CoilMaps<T>) -> Result<(), DatasetError> {
    write_array(path, Role::Maps, &maps.shape(), maps.data())
}

pub fn load_maps<T: Real>(path: &Path, smoothness: T) -> Result<CoilMaps<T>, DatasetError> {
    let (shape, data) = read_role(path, Role::Maps)?;
    if shape.len() != 3 {
        return Err(DatasetError::InvalidContents(format!("maps must be 3-D, got {shape:?}")));
    }
    CoilMaps::new(shape[0], shape[1], shape[2], data, smoothness)
        .map_err(|e| DatasetError::InvalidContents(e.to_string()))
}

/// Masks are always stored as `c64` with values 0 or 1.
pub fn save_mask(path: &Path, mask: &SamplingMask) -> Result<(), DatasetError> {
    let data: Vec<Complex<f32>> = mask
        .data()
        .iter()
        .map(|&m| Complex::new(if m { 1.0 } else { 0.0 }, 0.0))
        .collect();
    write_bytes(path, &encode_with_dtype(Role::Mask, &mask.shape(), &data, Dtype::C64))
}

pub fn load_mask(path: &Path, acceleration: f64, kind: MaskKind) -> Result<SamplingMask, DatasetError> {
    let (shape, data) = read_role::<f32>(path, Role::Mask)?;
    let mut flags = Vec::with_capacity(data.len());
    for z in data {
        if z.im != 0.0 || !(z.re == 0.0 || z.re == 1.0) {
            return Err(DatasetError::InvalidContents("mask entries must be 0 or 1".into()));
        }
        flags.push(z.re == 1.0);
    }
    SamplingMask::new(&shape, flags, acceleration, kind)
        .map_err(|e| DatasetError::InvalidContents(e.to_string()))
}

/// One synthetic acquisition: ground truth, coil maps, mask and measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem<T> {
    pub image: ComplexImage<T>,
    pub maps: CoilMaps<T>,
    pub mask: SamplingMask,
    pub kspace: KSpaceData<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ItemManifest {
    id: String,
    noise_sigma: f64,
    acceleration: f64,
    mask_kind: MaskKind,
    coil_smoothness: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    items: Vec<ItemManifest>,
}

const DATASET_FORMAT: &str = "molk-dataset-1";

fn item_path(dir: &Path, id: &str, part: &str) -> PathBuf {
    dir.join(format!("{id}_{part}.molk"))
}

/// Writes every item as four container files plus a `manifest.json`.
pub fn save_dataset<T: Real>(dir: &Path, items: &[DatasetItem<T>]) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        items: Vec::with_capacity(items.len()),
    };
    for (k, item) in items.iter().enumerate() {
        let id = format!("{k:04}");
        save_image(&item_path(dir, &id, "image"), &item.image)?;
        save_maps(&item_path(dir, &id, "maps"), &item.maps)?;
        save_mask(&item_path(dir, &id, "mask"), &item.mask)?;
        save_kspace(&item_path(dir, &id, "kspace"), &item.kspace)?;
        manifest.items.push(ItemManifest {
            id,
            noise_sigma: item.kspace.noise_sigma.as_f64(),
            acceleration: item.mask.acceleration,
            mask_kind: item.mask.kind,
            coil_smoothness: item.maps.smoothness.as_f64(),
        });
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
    write_bytes(&path, &json)
}

pub fn load_dataset<T: Real>(dir: &Path) -> Result<Vec<DatasetItem<T>>, DatasetError> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)
        .map_err(|e| DatasetError::MalformedHeader(format!("manifest: {e}")))?;
    if manifest.format != DATASET_FORMAT {
        return Err(DatasetError::UnsupportedVersion(manifest.format));
    }
    manifest
        .items
        .iter()
        .map(|m| {
            let item = DatasetItem {
                image: load_image(&item_path(dir, &m.id, "image"))?,
                maps: load_maps(&item_path(dir, &m.id, "maps"), T::lit(m.coil_smoothness))?,
                mask: load_mask(&item_path(dir, &m.id, "mask"), m.acceleration, m.mask_kind)?,
                kspace: load_kspace(&item_path(dir, &m.id, "kspace"), T::lit(m.noise_sigma))?,
            };
            if item.kspace.image_shape() != item.image.shape()
                || item.mask.shape() != item.image.shape()
                || item.maps.shape()[1..] != item.image.shape()[..2]
            {
                return Err(DatasetError::InvalidContents(format!(
                    "item {} has inconsistent shapes",
                    m.id
                )));
            }
            Ok(item)
        })
        .collect()
}
