//! Checkpoint files.
//!
//! Layout, little-endian: `"TCNN"`, `u16` version, 32-byte SHA-256 of the spec
//! JSON, `u32` length + spec JSON, `u32` tensor count, then the parameters in
//! spec order followed by each normalization layer's running mean and
//! variance, each as a tensor record.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Model, ModelSpec};
use crate::tensor::io::{read_tensor, write_tensor};
use crate::{Error, Result, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TCNN";
pub const CHECKPOINT_VERSION: u16 = 1;

fn spec_bytes(spec: &ModelSpec) -> Vec<u8> {
    serde_json::to_vec(spec).expect("spec serializes")
}

pub fn spec_digest(spec: &ModelSpec) -> [u8; 32] {
    let mut out = [0u8; 32];
    out.copy_from_slice(&Sha256::digest(spec_bytes(spec)));
    out
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_checkpoint(model, &mut out)?;
    out.flush()?;
    Ok(())
}

fn write_checkpoint<W: Write>(model: &Model, out: &mut W) -> Result<()> {
    let json = spec_bytes(model.spec());
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&spec_digest(model.spec()))?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    let stats = model.store().stats();
    let count = model.params().len() + 2 * stats.len();
    out.write_all(&(count as u32).to_le_bytes())?;
    for t in model.params() {
        write_tensor(out, t)?;
    }
    for s in stats {
        write_tensor(out, &s.mean)?;
        write_tensor(out, &s.var)?;
    }
    Ok(())
}

/// Load a checkpoint. Any truncation or mismatch fails before a model is
/// returned.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let bytes = fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}

fn read_checkpoint<R: Read>(input: &mut R) -> Result<Model> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut v = [0u8; 2];
    read_exact(input, &mut v, "version")?;
    let version = u16::from_le_bytes(v);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut digest = [0u8; 32];
    read_exact(input, &mut digest, "spec digest")?;
    let len = crate::tensor::io::read_u32(input, "spec length")? as usize;
    if len > 1 << 24 {
        return Err(Error::Format(format!("implausible spec length {len}")));
    }
    let mut json = vec![0u8; len];
    read_exact(input, &mut json, "spec")?;
    let spec: ModelSpec =
        serde_json::from_slice(&json).map_err(|e| Error::Format(format!("spec JSON: {e}")))?;
    if spec_digest(&spec) != digest {
        return Err(Error::Format("spec digest does not match the stored spec".into()));
    }
    let mut model = Model::build(&spec, 0)?;
    let count = crate::tensor::io::read_u32(input, "tensor count")? as usize;
    let expected = model.params().len() + 2 * model.store().stats().len();
    if count != expected {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint holds {count} tensors, spec needs {expected}"
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(read_tensor(input)?);
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", rest.len())));
    }
    let np = model.params().len();
    for (slot, t) in model.params_mut().iter_mut().zip(&tensors[..np]) {
        put(slot, t)?;
    }
    for (s, pair) in model.store_mut().stats_mut().iter_mut().zip(tensors[np..].chunks(2)) {
        put(&mut s.mean, &pair[0])?;
        put(&mut s.var, &pair[1])?;
    }
    Ok(model)
}

fn put(slot: &mut Tensor, t: &Tensor) -> Result<()> {
    if slot.shape() != t.shape() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint tensor {} where the spec needs {}",
            t.shape(),
            slot.shape()
        )));
    }
    *slot = t.clone();
    Ok(())
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|e| crate::tensor::io::truncated(e, what))
}
