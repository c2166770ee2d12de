//! FTEN binary tensor blocks.
//!
//! Layout: `b"FTEN"`, version `u8 = 1`, dtype `u8` (0 = f32, 1 = f64),
//! rank `u8`, `rank` little-endian `u64` extents, then the row-major payload
//! in little-endian.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FTEN";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Writes one block. `Dtype::F32` rounds each element to single precision.
pub fn write_ften<W: Write>(w: &mut W, t: &Tensor, dtype: Dtype) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::shape("rank exceeds 255"));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, dtype.code(), t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * dtype.width());
    match dtype {
        Dtype::F32 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one block, widening f32 payloads to f64.
pub fn read_ften<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 7];
    read_exact(r, &mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad FTEN magic".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported FTEN version {}", head[4])));
    }
    let dtype = match head[5] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(Error::Format(format!("unknown FTEN dtype {other}"))),
    };
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        read_exact(r, &mut b)?;
        shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| {
            Error::Format("extent does not fit in usize".into())
        })?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= (1 << 32))
        .ok_or_else(|| Error::Format(format!("implausible FTEN shape {shape:?}")))?;
    let mut payload = vec![0u8; numel * dtype.width()];
    read_exact(r, &mut payload)?;
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated FTEN block".into()),
        _ => Error::Io(e),
    })
}
