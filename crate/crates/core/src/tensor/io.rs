//! Flat binary tensor files.
//!
//! Layout: the 6-byte magic `GTNSR1`, one dtype byte (0 = f64, 1 = f32),
//! one rank byte, rank little-endian u32 extents, then the row-major
//! little-endian payload. No alignment, no compression, no metadata. The
//! encoding is unique for a given tensor, which is what makes dataset and
//! checkpoint files byte-reproducible.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"GTNSR1";

pub fn encode_tensor<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let shape = t.shape();
    let data = t.to_vec();
    let mut out = Vec::with_capacity(8 + 4 * shape.len() + data.len() * S::BYTES);
    out.extend_from_slice(MAGIC);
    out.push(S::DTYPE.code());
    out.push(shape.len() as u8);
    for &e in &shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in data {
        v.write_le(&mut out);
    }
    out
}

/// Decodes one tensor from `bytes`. `label` names the source in errors.
pub fn decode_tensor<S: Scalar>(bytes: &[u8], label: &str) -> Result<Tensor<S>> {
    let fail = |detail: String| Error::format(label, detail);
    if bytes.len() < 8 {
        return Err(fail(format!("file too short for a tensor header: {} bytes", bytes.len())));
    }
    if &bytes[..6] != MAGIC {
        return Err(fail(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..6]),
            "GTNSR1"
        )));
    }
    let dtype = DType::from_code(bytes[6])
        .ok_or_else(|| fail(format!("unknown dtype code {}", bytes[6])))?;
    if dtype != S::DTYPE {
        return Err(fail(format!(
            "dtype is {}, expected {}",
            dtype.name(),
            S::DTYPE.name()
        )));
    }
    let ndim = bytes[7] as usize;
    if ndim == 0 {
        return Err(fail("rank 0 tensor not supported".into()));
    }
    let header = 8 + 4 * ndim;
    if bytes.len() < header {
        return Err(fail("file truncated inside the shape header".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[8 + 4 * i..12 + 4 * i]);
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let numel: usize = shape.iter().product();
    let expected = header + numel * S::BYTES;
    if bytes.len() != expected {
        return Err(fail(format!(
            "payload length mismatch: shape {shape:?} needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        data.push(S::read_le(&bytes[header + i * S::BYTES..]));
    }
    Tensor::from_vec(&shape, data)
}

pub fn write_tensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    std::fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_tensor(&bytes, &path.display().to_string())
}
