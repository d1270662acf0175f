//! The SGT1 binary tensor format.
//!
//! ```text
//! "SGT1" | u8 dtype (0 = f32, 1 = f64) | u8 ndim | ndim × u32 LE extents | row-major LE scalars
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{check_shape, DType, Element, Tensor};
use crate::error::{Error, Result};

pub const SGT1_MAGIC: &[u8; 4] = b"SGT1";

/// A tensor whose scalar type is only known at runtime.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
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

    /// Converts (losslessly when the dtype already matches) into `Tensor<T>`.
    pub fn into_tensor<T: Element>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => encode(t, out),
            AnyTensor::F64(t) => encode(t, out),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

pub fn encode<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(SGT1_MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

fn fmt_err(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "SGT1",
        reason: reason.into(),
    }
}

/// Decodes one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    if bytes.len() < 6 || &bytes[..4] != SGT1_MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let dtype =
        DType::from_code(bytes[4]).ok_or_else(|| fmt_err(format!("dtype code {}", bytes[4])))?;
    let ndim = bytes[5] as usize;
    let mut pos = 6;
    if bytes.len() < pos + 4 * ndim {
        return Err(fmt_err("truncated header"));
    }
    let shape: Vec<usize> = (0..ndim)
        .map(|i| {
            u32::from_le_bytes(bytes[pos + 4 * i..pos + 4 * i + 4].try_into().unwrap()) as usize
        })
        .collect();
    pos += 4 * ndim;
    check_shape(&shape)?;
    let numel: usize = shape.iter().product();
    let need = numel * dtype.size();
    if bytes.len() < pos + need {
        return Err(fmt_err(format!("expected {need} payload bytes")));
    }
    let payload = &bytes[pos..pos + need];
    let t = match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(
            shape,
            payload.chunks_exact(4).map(f32::read_le).collect(),
        )?),
        DType::F64 => AnyTensor::F64(Tensor::new(
            shape,
            payload.chunks_exact(8).map(f64::read_le).collect(),
        )?),
    };
    Ok((t, pos + need))
}

/// Writes `bytes` to `path` via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_sgt1(path: &Path, tensor: &AnyTensor) -> Result<()> {
    let mut buf = Vec::new();
    tensor.encode(&mut buf);
    write_atomic(path, &buf)
}

pub fn read_sgt1(path: &Path) -> Result<AnyTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(fmt_err(format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}
