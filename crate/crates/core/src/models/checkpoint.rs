//! `SMDL1` model checkpoints.
//!
//! ```text
//! SMDL1 {"arch":"unet","config":{...}}\n
//! u32 blob count, then per blob:
//!   u32 name length, name (UTF-8), u32 rank, rank x u32 dims, little-endian f32 data
//! ```
//!
//! Blobs are the parameters in registry order followed by each batch-norm
//! layer's `running_mean` and `running_var`. All integers are little-endian.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_network, Model, ModelConfig, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::write_atomic;

const MAGIC: &[u8] = b"SMDL1 ";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: String,
    config: ModelConfig,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Checkpoint(format!("{v} does not fit in a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_blob(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len())?;
    for &d in shape {
        put_u32(out, d)?;
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn write_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        arch: model.network.name().to_string(),
        config: model.config.clone(),
    };
    let mut out = MAGIC.to_vec();
    out.extend(serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    put_u32(&mut out, model.params.len() + 2 * model.stats.len())?;
    for (name, p) in model.names.iter().zip(&model.params) {
        put_blob(&mut out, name, p.shape(), p.data())?;
    }
    for (name, s) in model.stat_names.iter().zip(&model.stats) {
        put_blob(&mut out, &format!("{name}.running_mean"), &[s.mean.len()], &s.mean)?;
        put_blob(&mut out, &format!("{name}.running_var"), &[s.var.len()], &s.var)?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated at byte {}: wanted {n} more bytes, {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn blob(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let len = self.u32()?;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Checkpoint(format!("blob name at byte {} is not UTF-8", self.pos)))?
            .to_string();
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("blob {name} extents overflow")))?;
        let data = self
            .take(count)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((name, shape, data))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Model> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::Checkpoint("not an SMDL1 checkpoint (bad magic)".into()));
    }
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("unterminated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[MAGIC.len()..newline])
        .map_err(|e| Error::Checkpoint(format!("bad checkpoint header: {e}")))?;
    let network = Network::parse(&header.arch)
        .ok_or_else(|| Error::Checkpoint(format!("unknown architecture {:?}", header.arch)))?;
    let mut model: Model = build_network(network, &header.config, 0)
        .map_err(|e| Error::Checkpoint(format!("cannot rebuild {}: {e}", header.arch)))?;

    let mut r = Reader {
        bytes,
        pos: newline + 1,
    };
    let count = r.u32()?;
    let mut blobs = HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, shape, data) = r.blob()?;
        if blobs.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate blob {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last blob",
            bytes.len() - r.pos
        )));
    }
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let (s, data) = blobs
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing blob {name}")))?;
        if s != shape {
            return Err(Error::Checkpoint(format!(
                "blob {name} has shape {s:?}, model expects {shape:?}"
            )));
        }
        Ok(data)
    };
    for i in 0..model.params.len() {
        let shape = model.params[i].shape().to_vec();
        let data = take(&model.names[i], &shape)?;
        model.params[i] = Tensor::new(shape, data)?;
    }
    for i in 0..model.stats.len() {
        let c = model.stats[i].mean.len();
        let name = model.stat_names[i].clone();
        model.stats[i].mean = take(&format!("{name}.running_mean"), &[c])?;
        model.stats[i].var = take(&format!("{name}.running_var"), &[c])?;
    }
    if let Some(extra) = blobs.keys().min() {
        return Err(Error::Checkpoint(format!(
            "blob {extra} does not belong to {}",
            header.arch
        )));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &write_checkpoint(model)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
