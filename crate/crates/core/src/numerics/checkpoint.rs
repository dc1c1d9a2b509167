//! Flat binary parameter files.
//!
//! Layout (little-endian): magic `KDPC`, format version `u32`, record count
//! `u64`, then per record: name length `u32`, UTF-8 name, rank `u32`, extents
//! as `u64`, and the values as `f64`.

use std::io::{Read, Write};

use super::error::{NumericsError, Result};
use super::tensor::Tensor;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KDPC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One named array read back from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

fn io(e: std::io::Error) -> NumericsError {
    NumericsError::Checkpoint(e.to_string())
}

pub fn write_records<W: Write>(w: &mut W, records: &[Record]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(records.len() as u64).to_le_bytes()).map_err(io)?;
    for r in records {
        if r.shape.iter().product::<usize>() != r.values.len() {
            return Err(NumericsError::Checkpoint(format!("record {} shape/value mismatch", r.name)));
        }
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        w.write_all(&(r.shape.len() as u32).to_le_bytes()).map_err(io)?;
        for d in &r.shape {
            w.write_all(&(*d as u64).to_le_bytes()).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(r.values.len() * 8);
        for v in &r.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(io)?;
    Ok(b)
}

pub fn read_records<R: Read>(r: &mut R) -> Result<Vec<Record>> {
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NumericsError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != CHECKPOINT_VERSION {
        return Err(NumericsError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(read_exact(r)?);
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(read_exact(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
        let rank = u32::from_le_bytes(read_exact(r)?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact(r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw).map_err(io)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(Record { name, shape, values });
    }
    Ok(out)
}

/// Snapshot of named tensors as records.
pub fn records_from<S: Scalar>(named: &[(String, Tensor<S>)]) -> Vec<Record> {
    named
        .iter()
        .map(|(name, t)| Record {
            name: name.clone(),
            shape: t.shape().to_vec(),
            values: t.data().iter().map(|v| v.as_f64()).collect(),
        })
        .collect()
}

/// Copies record values into same-named tensors. Every tensor must be
/// present with a matching shape.
pub fn load_into<S: Scalar>(named: &[(String, Tensor<S>)], records: &[Record]) -> Result<()> {
    for (name, t) in named {
        let r = records
            .iter()
            .find(|r| &r.name == name)
            .ok_or_else(|| NumericsError::Checkpoint(format!("missing tensor {name}")))?;
        if r.shape != t.shape() {
            return Err(NumericsError::Checkpoint(format!(
                "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                r.shape,
                t.shape()
            )));
        }
        t.update_data(|d| d.iter_mut().zip(&r.values).for_each(|(x, v)| *x = S::lit(*v)))?;
    }
    Ok(())
}
