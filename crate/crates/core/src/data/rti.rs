//! The RTI raw tensor-image format.
//!
//! ```text
//! "RTI1" | rank: u8 | extents: rank × u32 LE | payload: f32 LE, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RTI1";

pub fn encode(tensor: &Tensor<f32>) -> Result<Vec<u8>> {
    if !tensor.is_finite() {
        return Err(Error::NonFinite("rti encode"));
    }
    let rank = u8::try_from(tensor.shape().len())
        .map_err(|_| Error::Shape(format!("rank {} too large for RTI", tensor.shape().len())))?;
    let mut out = Vec::with_capacity(5 + 4 * rank as usize + 4 * tensor.len());
    out.extend_from_slice(MAGIC);
    out.push(rank);
    for &e in tensor.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Shape(format!("extent {e} too large for RTI")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    out.extend_from_slice(&tensor.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor<f32>> {
    let fail = |reason: String| Error::format(origin, reason);
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(fail("bad magic, expected \"RTI1\"".into()));
    }
    let rank = bytes[4] as usize;
    if rank == 0 {
        return Err(fail("rank 0".into()));
    }
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(fail("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[5..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| fail("extent product overflows".into()))?;
    let expect = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| fail("payload size overflows".into()))?;
    if bytes.len() != expect {
        return Err(fail(format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            bytes.len() - header,
            4 * count
        )));
    }
    let data: Vec<f32> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::from_vec(&shape, data).map_err(|e| fail(e.to_string()))
}

pub fn write_rti(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    let bytes = encode(tensor)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_rti(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads a label map and checks that it is binary.
pub fn read_label(path: &Path) -> Result<Tensor<f32>> {
    let t = read_rti(path)?;
    if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::format(path, "label values outside {0, 1}"));
    }
    Ok(t)
}
