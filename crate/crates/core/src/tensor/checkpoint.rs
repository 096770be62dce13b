//! `.fyw` parameter files: `FYW1`, u32-LE header length, JSON header with the
//! parameter table, then every tensor as f32-LE in table order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{numel, ParamStore, Shape, Tensor, TensorError};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"FYW1";
const FORMAT: &str = "fyw";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: serde_json::Value,
    params: Vec<ParamEntry>,
}

/// Decoded checkpoint: free-form configuration plus the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub params: ParamStore<f32>,
}

fn fmt_err(e: impl std::fmt::Display) -> TensorError {
    TensorError::Format(e.to_string())
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    mut w: W,
    config: &serde_json::Value,
    params: &ParamStore<T>,
) -> Result<(), TensorError> {
    let mut offset = 0u64;
    let entries = params
        .iter()
        .map(|(name, t)| {
            let e = ParamEntry {
                name: name.to_string(),
                shape: t.shape.to_vec(),
                offset,
            };
            offset += 4 * t.numel() as u64;
            e
        })
        .collect();
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: config.clone(),
        params: entries,
    };
    let json = serde_json::to_vec(&header).map_err(fmt_err)?;
    let len = u32::try_from(json.len()).map_err(fmt_err)?;
    w.write_all(MAGIC).map_err(fmt_err)?;
    w.write_all(&len.to_le_bytes()).map_err(fmt_err)?;
    w.write_all(&json).map_err(fmt_err)?;
    for t in params.tensors() {
        for v in &t.data {
            w.write_all(&(v.widen() as f32).to_le_bytes())
                .map_err(fmt_err)?;
        }
    }
    w.flush().map_err(fmt_err)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, TensorError> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head).map_err(fmt_err)?;
    if &head[..4] != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let len = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(fmt_err)?;
    let header: Header = serde_json::from_slice(&json).map_err(fmt_err)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(TensorError::Format(format!(
            "unsupported {} v{}",
            header.format, header.version
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(fmt_err)?;
    let mut params = ParamStore::new();
    for e in header.params {
        let shape: Shape = e.shape.as_slice().try_into().map_err(|_| {
            TensorError::Format(format!("{}: shape {:?} is not 4-D", e.name, e.shape))
        })?;
        let start = e.offset as usize;
        let end = start + 4 * numel(&shape);
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| TensorError::Format(format!("{}: payload truncated", e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if params.slot(&e.name).is_some() {
            return Err(TensorError::Format(format!(
                "duplicate parameter {}",
                e.name
            )));
        }
        params.add(e.name, Tensor { shape, data });
    }
    Ok(Checkpoint {
        config: header.config,
        params,
    })
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    config: &serde_json::Value,
    params: &ParamStore<T>,
) -> Result<(), TensorError> {
    let f = File::create(path).map_err(fmt_err)?;
    write_checkpoint(BufWriter::new(f), config, params)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TensorError> {
    let f = File::open(path).map_err(fmt_err)?;
    read_checkpoint(BufReader::new(f))
}
