//! Parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  b"DBFCKPT\0"
//! version  u32      1
//! count    u32      number of entries
//! entry*   layer_id u32, name_len u16, name (utf-8),
//!          ndim u16, dims u64 * ndim, values f64 * prod(dims)
//! ```
//!
//! Entries appear in parameter-id order. Values are stored as raw IEEE-754
//! bits, so a save/load cycle is bit-exact.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::detector::Detector;
use super::layer::LayerId;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DBFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub layer: LayerId,
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn entries(detector: &Detector) -> Vec<CheckpointEntry> {
    detector
        .parameters()
        .iter()
        .map(|p| CheckpointEntry {
            layer: p.layer,
            name: p.name.clone(),
            shape: p.shape.clone(),
            values: p.values.clone(),
        })
        .collect()
}

pub fn write_checkpoint<W: Write>(detector: &Detector, mut w: W) -> io::Result<()> {
    let entries = entries(detector);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in &entries {
        w.write_all(&e.layer.0.to_le_bytes())?;
        w.write_all(&(e.name.len() as u16).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&(e.shape.len() as u16).to_le_bytes())?;
        for &d in &e.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &e.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<CheckpointEntry>> {
    if &read_array::<8, _>(&mut r)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut out = Vec::new();
    for _ in 0..count {
        let layer = LayerId(u32::from_le_bytes(read_array(&mut r)?));
        let name_len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| bad(format!("truncated: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not utf-8"))?;
        let ndim = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(read_array(&mut r)?) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("shape overflows"))?;
        let mut values = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            values.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        out.push(CheckpointEntry {
            layer,
            name,
            shape,
            values,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
        return Err(bad("trailing bytes after last entry"));
    }
    Ok(out)
}

pub fn save(detector: &Detector, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(detector, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(bytes.as_slice())
}
