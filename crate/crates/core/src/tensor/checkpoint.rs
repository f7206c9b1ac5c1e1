//! Parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "LCTPARAM"
//! version  u32      1
//! count    u32      number of parameters
//! repeated count times:
//!   name_len u32, name (UTF-8)
//!   rank     u32, extents u64 x rank
//!   values   f64 x product(extents), row-major
//! ```
//!
//! Values are always stored as `f64`, whatever precision the model computes in.

use std::path::Path;

use super::{ParamStore, Tensor};
use crate::bytes::ByteReader;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"LCTPARAM";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_weights() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

/// Decode into `(name, tensor)` pairs in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f64>)>> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC, "checkpoint")?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            what: "checkpoint",
            reason: format!("unsupported version {version}"),
        });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Format {
            what: "checkpoint",
            reason: e.to_string(),
        })?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format {
                what: "checkpoint",
                reason: format!("shape {shape:?} overflows"),
            })?;
        let values = r.f64_vec(n)?;
        out.push((name, Tensor::new(&shape, values)?));
    }
    if r.remaining() != 0 {
        return Err(Error::Format {
            what: "checkpoint",
            reason: format!("{} trailing bytes", r.remaining()),
        });
    }
    Ok(out)
}

/// Overwrite the values of `store` from a checkpoint with matching names and
/// shapes. Optimizer moments are left untouched.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, bytes: &[u8]) -> Result<()> {
    let entries = decode(bytes)?;
    if entries.len() != store.len() {
        return Err(Error::Format {
            what: "checkpoint",
            reason: format!(
                "{} parameters in file, model has {}",
                entries.len(),
                store.len()
            ),
        });
    }
    for ((name, t), p) in entries.iter().zip(store.iter_mut()) {
        if *name != p.name || t.shape() != p.tensor.shape() {
            return Err(Error::Format {
                what: "checkpoint",
                reason: format!(
                    "parameter `{name}` {:?} does not match model `{}` {:?}",
                    t.shape(),
                    p.name,
                    p.tensor.shape()
                ),
            });
        }
        p.tensor = t.cast();
    }
    Ok(())
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_into(store, &bytes)
}
