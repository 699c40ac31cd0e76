//! Scalar voxel volumes and their raw + JSON sidecar file format.
//!
//! A volume named `scan` is stored as `scan.raw` (little-endian voxels,
//! z-major) next to `scan.json`:
//!
//! ```json
//! {"dims":[D,H,W],"dtype":"uint8","voxel_size_um":3.8}
//! ```

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "uint8")]
    U8,
    #[serde(rename = "uint16")]
    U16,
    #[serde(rename = "float32")]
    F32,
}

impl DType {
    pub const fn byte_width(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::U16 => 2,
            DType::F32 => 4,
        }
    }

    /// Peak value `MAX_I` used for normalization and PSNR.
    pub const fn max_value(self) -> f64 {
        match self {
            DType::U8 => 255.0,
            DType::U16 => 65535.0,
            DType::F32 => 1.0,
        }
    }

    pub const fn is_integer(self) -> bool {
        !matches!(self, DType::F32)
    }

    pub const fn name(self) -> &'static str {
        match self {
            DType::U8 => "uint8",
            DType::U16 => "uint16",
            DType::F32 => "float32",
        }
    }

    /// Round and clamp a real value onto this dtype's grid. Float volumes
    /// pass through unchanged.
    pub fn quantize(self, v: f64) -> f32 {
        match self {
            DType::F32 => v as f32,
            // `+ 0.0` turns the -0.0 that rounding small negatives yields into 0
            _ => (v.round().clamp(0.0, self.max_value()) + 0.0) as f32,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uint8" => Ok(DType::U8),
            "uint16" => Ok(DType::U16),
            "float32" => Ok(DType::F32),
            other => Err(Error::UnknownDtype(other.to_string())),
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A `D×H×W` scalar grid. Voxels are held as `f32`, which represents every
/// `uint8` and `uint16` value exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    dtype: DType,
    voxel_size_um: f64,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, dtype: DType, voxel_size_um: f64, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidVolume(format!(
                "dims {dims} must be positive"
            )));
        }
        if data.len() != dims.len() {
            return Err(Error::InvalidVolume(format!(
                "{dims} needs {} voxels, got {}",
                dims.len(),
                data.len()
            )));
        }
        if !(voxel_size_um.is_finite() && voxel_size_um > 0.0) {
            return Err(Error::InvalidVolume(format!(
                "voxel size {voxel_size_um} must be positive"
            )));
        }
        if let Some(bad) = data.iter().find(|v| !representable(**v, dtype)) {
            return Err(Error::InvalidVolume(format!(
                "value {bad} not representable as {dtype}"
            )));
        }
        Ok(Volume {
            dims,
            dtype,
            voxel_size_um,
            data,
        })
    }

    /// Build from arbitrary reals, quantizing onto the dtype grid.
    pub fn from_reals(
        dims: Dims,
        dtype: DType,
        voxel_size_um: f64,
        values: impl IntoIterator<Item = f64>,
    ) -> Result<Self> {
        let data = values.into_iter().map(|v| dtype.quantize(v)).collect();
        Volume::new(dims, dtype, voxel_size_um, data)
    }

    pub fn filled(dims: Dims, dtype: DType, value: f32) -> Result<Self> {
        Volume::new(dims, dtype, 1.0, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn voxel_size_um(&self) -> f64 {
        self.voxel_size_um
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.dims.index(z, y, x)]
    }

    pub fn with_voxel_size(mut self, voxel_size_um: f64) -> Self {
        self.voxel_size_um = voxel_size_um;
        self
    }

    /// Leading `dims` region of this volume.
    pub fn crop_leading(&self, dims: Dims) -> Volume {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.depth {
            for y in 0..dims.height {
                let off = self.dims.index(z, y, 0);
                data.extend_from_slice(&self.data[off..off + dims.width]);
            }
        }
        Volume {
            dims,
            dtype: self.dtype,
            voxel_size_um: self.voxel_size_um,
            data,
        }
    }
}

fn representable(v: f32, dtype: DType) -> bool {
    match dtype {
        DType::F32 => v.is_finite(),
        _ => v.fract() == 0.0 && v >= 0.0 && f64::from(v) <= dtype.max_value(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    dtype: String,
    voxel_size_um: f64,
}

/// Resolve the `.raw` and `.json` paths for a volume path given with
/// either extension (or none).
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("raw"), path.with_extension("json"))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (raw_path, json_path) = volume_paths(path.as_ref());
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Sidecar {
        path: json_path.clone(),
        reason: e.to_string(),
    })?;
    let dtype: DType = sidecar.dtype.parse()?;
    let dims = Dims::from_array(sidecar.dims);
    if dims.is_empty() {
        return Err(Error::Sidecar {
            path: json_path,
            reason: format!("dims {dims} must be positive"),
        });
    }

    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = (dims.len() * dtype.byte_width()) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data = decode(&bytes, dtype, dims.len());
    Volume::new(dims, dtype, sidecar.voxel_size_um, data)
}

fn decode(bytes: &[u8], dtype: DType, n: usize) -> Vec<f32> {
    match dtype {
        DType::U8 => bytes.iter().map(|&b| f32::from(b)).collect(),
        DType::U16 => {
            let mut words = vec![0u16; n];
            LittleEndian::read_u16_into(bytes, &mut words);
            words.into_iter().map(f32::from).collect()
        }
        DType::F32 => {
            let mut vals = vec![0f32; n];
            LittleEndian::read_f32_into(bytes, &mut vals);
            vals
        }
    }
}

fn encode(vol: &Volume) -> Vec<u8> {
    let n = vol.data.len();
    let mut out = vec![0u8; n * vol.dtype.byte_width()];
    match vol.dtype {
        DType::U8 => {
            for (o, &v) in out.iter_mut().zip(&vol.data) {
                *o = v as u8;
            }
        }
        DType::U16 => {
            let words: Vec<u16> = vol.data.iter().map(|&v| v as u16).collect();
            LittleEndian::write_u16_into(&words, &mut out);
        }
        DType::F32 => LittleEndian::write_f32_into(&vol.data, &mut out),
    }
    out
}

/// Write `path` by streaming into a temporary sibling file and renaming it
/// over the target once `write` succeeds. On failure the target is left
/// untouched and the temporary file is removed.
pub(crate) fn write_atomic(
    path: &Path,
    write: impl FnOnce(&mut dyn Write) -> io::Result<()>,
) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let (raw_path, json_path) = volume_paths(path.as_ref());
    let bytes = encode(vol);
    write_atomic(&raw_path, |w| w.write_all(&bytes))?;
    let sidecar = Sidecar {
        dims: vol.dims.as_array(),
        dtype: vol.dtype.name().to_string(),
        voxel_size_um: vol.voxel_size_um,
    };
    let text = serde_json::to_string(&sidecar)?;
    write_atomic(&json_path, |w| w.write_all(text.as_bytes()))
}

/// Map a volume to a single-channel tensor with values `raw / MAX_I`.
pub fn to_normalized<T: Real>(vol: &Volume) -> Tensor4<T> {
    let scale = vol.dtype.max_value();
    let data = vol
        .data
        .iter()
        .map(|&v| T::of(f64::from(v) / scale))
        .collect();
    Tensor4::from_vec(Shape4::new(1, vol.dims), data).expect("volume dims are positive")
}

/// Inverse of [`to_normalized`]: clamp to `[0, 1]`, scale by `MAX_I` and
/// round onto the integer grid for integer dtypes.
pub fn from_normalized<T: Real>(
    t: &Tensor4<T>,
    dtype: DType,
    voxel_size_um: f64,
) -> Result<Volume> {
    if t.channels() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "expected a 1-channel tensor, got {} channels",
            t.channels()
        )));
    }
    let scale = dtype.max_value();
    let data = t
        .data()
        .iter()
        .map(|v| {
            let x = v.to_f64_lossless().clamp(0.0, 1.0) * scale;
            dtype.quantize(x)
        })
        .collect();
    Volume::new(t.spatial(), dtype, voxel_size_um, data)
}
