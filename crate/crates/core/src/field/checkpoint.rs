//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DNF1"
//! u32             metadata length
//! [u8]            metadata, UTF-8 JSON (field config echo + extras)
//! u32             section count
//! per section:
//!   u16           name length
//!   [u8]          name ("grid", "mlp")
//!   u64           value count
//!   [f32]         values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{FieldConfig, FieldError, RadianceField};

pub const MAGIC: &[u8; 4] = b"DNF1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub field: FieldConfig,
    #[serde(default)]
    pub extras: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub field: RadianceField,
}

fn write_section<W: Write>(w: &mut W, name: &str, values: &[f32]) -> io::Result<()> {
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn encode_checkpoint(
    field: &RadianceField,
    extras: &BTreeMap<String, serde_json::Value>,
) -> Vec<u8> {
    let meta = CheckpointMeta {
        field: field.config().clone(),
        extras: extras.clone(),
    };
    let meta = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
    let mut out = Vec::with_capacity(16 + meta.len() + field.param_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&2u32.to_le_bytes());
    write_section(&mut out, "grid", field.grid_params()).expect("vec write");
    write_section(&mut out, "mlp", field.mlp_params()).expect("vec write");
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CheckpointError::Corrupt("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let meta_len = read_u32(&mut r)? as usize;
    if r.len() < meta_len {
        return Err(CheckpointError::Corrupt("truncated metadata".into()));
    }
    let (meta_bytes, rest) = r.split_at(meta_len);
    r = rest;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| CheckpointError::Corrupt(format!("metadata: {e}")))?;
    let sections = read_u32(&mut r)?;
    let mut grid = None;
    let mut mlp = None;
    for _ in 0..sections {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)
            .map_err(|_| CheckpointError::Corrupt("truncated section name".into()))?;
        let name_len = u16::from_le_bytes(len) as usize;
        if r.len() < name_len {
            return Err(CheckpointError::Corrupt("truncated section name".into()));
        }
        let (name, rest) = r.split_at(name_len);
        r = rest;
        let mut count = [0u8; 8];
        r.read_exact(&mut count)
            .map_err(|_| CheckpointError::Corrupt("truncated section length".into()))?;
        let count = u64::from_le_bytes(count) as usize;
        let byte_len = count
            .checked_mul(4)
            .filter(|n| *n <= r.len())
            .ok_or_else(|| CheckpointError::Corrupt("truncated section data".into()))?;
        let (data, rest) = r.split_at(byte_len);
        r = rest;
        let values: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        match name {
            b"grid" => grid = Some(values),
            b"mlp" => mlp = Some(values),
            _ => {}
        }
    }
    let grid = grid.ok_or_else(|| CheckpointError::Corrupt("missing grid section".into()))?;
    let mlp = mlp.ok_or_else(|| CheckpointError::Corrupt("missing mlp section".into()))?;
    let field = RadianceField::from_params(meta.field.clone(), grid, mlp)?;
    Ok(Checkpoint { meta, field })
}

fn read_u32(r: &mut &[u8]) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| CheckpointError::Corrupt("truncated integer".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint(
    path: &Path,
    field: &RadianceField,
    extras: &BTreeMap<String, serde_json::Value>,
) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, encode_checkpoint(field, extras))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}
