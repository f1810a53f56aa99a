//! Binary checkpoint container: a versioned header with the run
//! configuration as JSON, followed by named little-endian `f64` blobs for
//! every parameter and its optimizer moments. Save/load round-trips are
//! byte-identical.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::optim::{AdamSlot, AdamState};
use crate::train::TrainConfig;

const MAGIC: &[u8; 8] = b"SKPCKPT\0";
const VERSION: u32 = 1;

/// Everything needed to resume or serve a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub epochs_completed: usize,
    pub params: ModelParams,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    train: TrainConfig,
    epochs_completed: usize,
    adam_step: u64,
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let header = serde_json::to_vec(&Header {
        train: ckpt.train.clone(),
        epochs_completed: ckpt.epochs_completed,
        adam_step: ckpt.adam.step,
    })
    .map_err(|e| Error::Checkpoint(format!("cannot serialize header: {e}")))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);

    let named = ckpt.params.named();
    let blob_count = named.len() * 3;
    out.extend_from_slice(&(blob_count as u32).to_le_bytes());
    for ((name, tensor), slot) in named.into_iter().zip(&ckpt.adam.slots) {
        let (rows, cols) = tensor.shape();
        write_blob(&mut out, &name, rows, cols, &tensor.values());
        write_blob(&mut out, &format!("opt.m:{name}"), rows, cols, &slot.m);
        write_blob(&mut out, &format!("opt.v:{name}"), rows, cols, &slot.v);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_blob(out: &mut Vec<u8>, name: &str, rows: usize, cols: usize, values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}, have {}",
                self.offset,
                self.bytes.len() - self.offset
            )));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Checkpoint(format!("cannot parse header: {e}")))?;

    let blob_count = r.u32()? as usize;
    let mut blobs: HashMap<String, (usize, usize, Vec<f64>)> = HashMap::with_capacity(blob_count);
    for _ in 0..blob_count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("blob name is not utf-8: {e}")))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = r.take(rows * cols * 8)?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if blobs.insert(name.clone(), (rows, cols, values)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate blob {name:?}")));
        }
    }
    if r.offset != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last blob",
            bytes.len() - r.offset
        )));
    }

    let mut param_blobs = HashMap::new();
    let mut moment_blobs = HashMap::new();
    for (name, blob) in blobs {
        if let Some(rest) = name.strip_prefix("opt.m:").or_else(|| name.strip_prefix("opt.v:")) {
            moment_blobs.insert((name.starts_with("opt.v:"), rest.to_string()), blob);
        } else {
            param_blobs.insert(name, blob);
        }
    }
    let params = ModelParams::from_blobs(&header.train.model, param_blobs)?;
    let mut slots = Vec::new();
    for (name, tensor) in params.named() {
        let mut moment = |is_v: bool| -> Result<Vec<f64>> {
            let key = (is_v, name.clone());
            let kind = if is_v { "opt.v" } else { "opt.m" };
            let (rows, cols, values) = moment_blobs
                .remove(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing blob {kind}:{name}")))?;
            if (rows, cols) != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "blob {kind}:{name} has shape {rows}x{cols}, expected {}",
                    tensor.shape_string()
                )));
            }
            Ok(values)
        };
        let m = moment(false)?;
        let v = moment(true)?;
        slots.push(AdamSlot { name, m, v });
    }
    if let Some(((_, name), _)) = moment_blobs.iter().next() {
        return Err(Error::Checkpoint(format!(
            "unexpected optimizer blob for {name:?}"
        )));
    }
    Ok(Checkpoint {
        train: header.train,
        epochs_completed: header.epochs_completed,
        params,
        adam: AdamState {
            step: header.adam_step,
            slots,
        },
    })
}
