//! `W4CL` tensor files.
//!
//! Header: magic `W4CL`, version `u8` (1), dtype `u8` (1 = little-endian
//! `f32`), ndim `u8`, one pad byte, then `ndim` little-endian `u32` dims.
//! Row-major data follows. Files with fewer than four dims load with leading
//! unit axes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"W4CL";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(8 + 16 + 4 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&[VERSION, DTYPE_F32, 4, 0]);
    for d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Size(format!("dim {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 8 {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected W4CL"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(4, format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::format(5, format!("unsupported dtype {}", bytes[5])));
    }
    let ndim = bytes[6] as usize;
    if !(1..=4).contains(&ndim) {
        return Err(Error::format(6, format!("ndim {ndim} outside 1..=4")));
    }
    let data_start = 8 + 4 * ndim;
    if bytes.len() < data_start {
        return Err(Error::format(bytes.len() as u64, "truncated dims"));
    }
    let mut dims = [1usize; 4];
    for i in 0..ndim {
        let o = 8 + 4 * i;
        dims[4 - ndim + i] = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(8, format!("dims {dims:?} overflow")))?;
    let body = &bytes[data_start..];
    if body.len() != count {
        let what = if body.len() < count { "truncated data" } else { "trailing bytes after data" };
        return Err(Error::format(
            (data_start + body.len().min(count)) as u64,
            format!("{what}: header declares {} values, file holds {} bytes", count / 4, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    Tensor::from_vec(dims, data)
}

pub fn write_tensor_file<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let bytes = encode_tensor(t)?;
    crate::model::write_atomic(path, &bytes)
}

pub fn read_tensor_file<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}
