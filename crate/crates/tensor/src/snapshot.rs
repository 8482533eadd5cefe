//! Binary tensor snapshots.
//!
//! Layout: magic `UATS`, format version (`u32` LE), dtype code (`u8`,
//! 0 = f32, 1 = f64), rank (`u8`), extents (`u64` LE each), then the
//! row-major payload in little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::element::{DType, Element};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UATS";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode<E: Element>(t: &Tensor<E>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(TensorError::Snapshot(format!("rank {} too large", t.rank())));
    }
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + t.numel() * E::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(E::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&E::to_le_vec(t.data()));
    Ok(out)
}

pub fn decode<E: Element>(bytes: &[u8]) -> Result<Tensor<E>> {
    let bad = |m: &str| TensorError::Snapshot(m.to_string());
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(bad("missing UATS magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let dtype = DType::from_code(bytes[8]).ok_or_else(|| bad(&format!("unknown dtype code {}", bytes[8])))?;
    if dtype != E::DTYPE {
        return Err(bad(&format!("stored dtype {:?}, requested {:?}", dtype, E::DTYPE)));
    }
    let rank = bytes[9] as usize;
    let header = 10 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated extents"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[10 + 8 * i..18 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != n * dtype.size() {
        return Err(bad(&format!(
            "payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            shape,
            n * dtype.size()
        )));
    }
    Tensor::new(&shape, E::from_le_slice(payload))
}

pub fn write<E: Element>(path: &Path, t: &Tensor<E>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(t)?)?;
    Ok(())
}

pub fn read<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}
