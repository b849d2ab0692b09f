//! `MVTN` tensor dump: magic, u32 version, u32 rank, u64 dims, u8 dtype,
//! little-endian payload.

use std::io::Read;
use std::path::Path;

use mvmcad_core::{DType, Real, Tensor};

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 4] = b"MVTN";
pub const VERSION: u32 = 1;

/// A tensor of either element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn from_real<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Exact when the dtypes agree, a plain cast otherwise.
    pub fn to_real<T: Real>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 + 4 + 8 * t.rank() + 1 + t.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(T::DTYPE as u8);
    match T::DTYPE {
        DType::F32 => {
            for v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    out
}

pub fn encode_any(t: &AnyTensor) -> Vec<u8> {
    match t {
        AnyTensor::F32(t) => encode(t),
        AnyTensor::F64(t) => encode(t),
    }
}

fn read_exact<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Reads one tensor from a stream, leaving the stream just past its payload.
pub fn read_from(r: &mut impl Read) -> std::result::Result<AnyTensor, String> {
    let io = |e: std::io::Error| format!("truncated tensor: {e}");
    if &read_exact::<4>(r).map_err(io)? != MAGIC {
        return Err("bad tensor magic".into());
    }
    let version = u32::from_le_bytes(read_exact(r).map_err(io)?);
    if version != VERSION {
        return Err(format!("unsupported tensor version {version}"));
    }
    let rank = u32::from_le_bytes(read_exact(r).map_err(io)?) as usize;
    if rank > 16 {
        return Err(format!("implausible rank {rank}"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(read_exact(r).map_err(io)?);
        shape.push(usize::try_from(d).map_err(|_| "dimension overflows usize".to_string())?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("element count overflows")?;
    let dtype = read_exact::<1>(r).map_err(io)?[0];
    let width = match dtype {
        0 => 4,
        1 => 8,
        other => return Err(format!("unknown dtype byte {other}")),
    };
    let mut payload = Vec::new();
    r.take((count * width) as u64).read_to_end(&mut payload).map_err(io)?;
    if payload.len() != count * width {
        return Err(format!("payload holds {} of {} bytes", payload.len(), count * width));
    }
    let bad = |e: mvmcad_core::Error| e.to_string();
    Ok(if dtype == 0 {
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        AnyTensor::F32(Tensor::new(shape, data).map_err(bad)?)
    } else {
        let data = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        AnyTensor::F64(Tensor::new(shape, data).map_err(bad)?)
    })
}

pub fn decode(bytes: &[u8]) -> std::result::Result<AnyTensor, String> {
    let mut cursor = bytes;
    let t = read_from(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(format!("{} trailing bytes", cursor.len()));
    }
    Ok(t)
}

pub fn write<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode(t)).at(path)
}

pub fn write_any(path: &Path, t: &AnyTensor) -> Result<()> {
    std::fs::write(path, encode_any(t)).at(path)
}

pub fn read(path: &Path) -> Result<AnyTensor> {
    let bytes = std::fs::read(path).at(path)?;
    decode(&bytes).map_err(|d| Error::format(path, d))
}
