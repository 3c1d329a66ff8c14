//! `FWIR` raster container.
//!
//! Layout (little-endian): `b"FWIR"` | u8 version (1) | u8 dtype (0 = f32,
//! 1 = f64, 2 = u8) | u8 rank | u8 padding | rank x u32 dims | row-major payload.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FWIR";
const VERSION: u8 = 1;
const MAX_RANK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

impl DType {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            other => Err(Error::Format(format!("unknown raster dtype tag {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Raster {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    U8(ArrayD<u8>),
}

impl Raster {
    pub fn dtype(&self) -> DType {
        match self {
            Raster::F32(_) => DType::F32,
            Raster::F64(_) => DType::F64,
            Raster::U8(_) => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Raster::F32(a) => a.shape(),
            Raster::F64(a) => a.shape(),
            Raster::U8(a) => a.shape(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let shape = self.shape();
        if shape.len() > MAX_RANK {
            return Err(Error::Format(format!("rank {} exceeds {MAX_RANK}", shape.len())));
        }
        let count: usize = shape.iter().product();
        let mut out = Vec::with_capacity(8 + 4 * shape.len() + count * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&[VERSION, self.dtype() as u8, shape.len() as u8, 0]);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        // `iter()` walks logical row-major order even for non-standard layouts.
        match self {
            Raster::F32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Raster::F64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Raster::U8(a) => out.extend(a.iter().copied()),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format(format!("raster header truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad raster magic {:?}", &bytes[..4])));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported raster version {}", bytes[4])));
        }
        let dtype = DType::from_tag(bytes[5])?;
        let rank = bytes[6] as usize;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let header = 8 + 4 * rank;
        if bytes.len() < header {
            return Err(Error::Format("raster dimension table truncated".into()));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|i| {
                let off = 8 + 4 * i;
                u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
            })
            .collect();
        let count: usize = shape.iter().product();
        let expected = count * dtype.size();
        let payload = &bytes[header..];
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "raster payload is {} bytes, shape {shape:?} needs {expected}",
                payload.len()
            )));
        }
        let dim = IxDyn(&shape);
        let raster = match dtype {
            DType::F32 => Raster::F32(ArrayD::from_shape_vec(
                dim,
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            )
            .map_err(|e| Error::Format(e.to_string()))?),
            DType::F64 => Raster::F64(ArrayD::from_shape_vec(
                dim,
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            )
            .map_err(|e| Error::Format(e.to_string()))?),
            DType::U8 => {
                Raster::U8(ArrayD::from_shape_vec(dim, payload.to_vec()).map_err(|e| Error::Format(e.to_string()))?)
            }
        };
        Ok(raster)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Any float raster widened to f64.
    pub fn into_f64(self) -> Result<ArrayD<f64>> {
        match self {
            Raster::F64(a) => Ok(a),
            Raster::F32(a) => Ok(a.mapv(f64::from)),
            Raster::U8(_) => Err(Error::Format("expected a float raster, found u8".into())),
        }
    }

    pub fn into_f32(self) -> Result<ArrayD<f32>> {
        match self {
            Raster::F32(a) => Ok(a),
            Raster::F64(a) => Ok(a.mapv(|v| v as f32)),
            Raster::U8(_) => Err(Error::Format("expected a float raster, found u8".into())),
        }
    }

    pub fn into_u8(self) -> Result<ArrayD<u8>> {
        match self {
            Raster::U8(a) => Ok(a),
            _ => Err(Error::Format("expected a u8 raster".into())),
        }
    }
}

pub fn write_f64_2d(path: impl AsRef<Path>, a: &Array2<f64>) -> Result<()> {
    Raster::F64(a.clone().into_dyn()).write(path)
}

pub fn read_f64_2d(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    Raster::read(path)?
        .into_f64()?
        .into_dimensionality()
        .map_err(|e| Error::Format(format!("expected a rank-2 raster: {e}")))
}

pub fn read_f64_3d(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    Raster::read(path)?
        .into_f64()?
        .into_dimensionality()
        .map_err(|e| Error::Format(format!("expected a rank-3 raster: {e}")))
}
