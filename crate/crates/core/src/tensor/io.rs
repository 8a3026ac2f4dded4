//! Flat binary tensor records: `u32 rank`, `u32 extents[rank]`, `f64 data[]`,
//! all little-endian. Data is always stored as f64; a single-precision build
//! rounds to nearest on load.

use std::io::{Read, Write};

use super::{Shape, Tensor};
use crate::{Error, Real, Result};

pub fn write_tensor<W: Write>(out: &mut W, t: &Tensor) -> Result<()> {
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.dims() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format(format!("extent {d} does not fit in u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f64).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(input: &mut R) -> Result<Tensor> {
    let rank = read_u32(input, "rank")? as usize;
    if rank > 64 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(input, "extent")? as usize);
    }
    let shape = Shape::new(dims).map_err(|e| Error::Format(e.to_string()))?;
    let n = shape.numel();
    let mut bytes = vec![0u8; n * 8];
    input.read_exact(&mut bytes).map_err(|e| truncated(e, "tensor data"))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")) as Real)
        .collect();
    Tensor::new(shape, data)
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn tensor_from_bytes(mut bytes: &[u8]) -> Result<Tensor> {
    read_tensor(&mut bytes)
}

pub(crate) fn read_u32<R: Read>(input: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(|e| truncated(e, what))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn truncated(e: std::io::Error, what: &str) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format(format!("truncated record while reading {what}"))
    } else {
        Error::Io(e)
    }
}
