//! Binary and JSON tensor containers.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! b"MTAT" | rank: u32 | extents: rank × u64 | values: numel × f64
//! ```

use super::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};

pub const MAGIC: &[u8; 4] = b"MTAT";

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::usage(format!("bad tensor magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(usize::try_from(u64::from_le_bytes(b8)).map_err(|_| Error::dim("extent overflows usize"))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::dim(format!("extents {shape:?} overflow")))?;
    let mut bytes = vec![0u8; numel * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

/// `{"shape": [...], "data": [...]}`.
pub fn write_tensor_json(t: &Tensor) -> String {
    serde_json::to_string(t).expect("tensor serializes")
}

pub fn read_tensor_json(s: &str) -> Result<Tensor> {
    let raw: Tensor = serde_json::from_str(s)?;
    let (shape, data) = (raw.shape().to_vec(), raw.into_data());
    Tensor::new(shape, data)
}
