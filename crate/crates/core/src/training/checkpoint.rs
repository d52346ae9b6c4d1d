//! Named-tensor checkpoint files.
//!
//! Layout: magic `FKPT`, `u32` version, `u32` entry count, then per entry a
//! `u16` name length, the UTF-8 name, a `u8` rank, `u32` dims and
//! little-endian `f32` data. The run metadata travels as an extra entry
//! named [`META_ENTRY`] whose values are the bytes of a JSON document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::gating::GatingVariant;
use crate::model::{Model, ModelSpec};
use crate::tensor::{ParameterStore, Tensor};

pub const MAGIC: &[u8; 4] = b"FKPT";
pub const VERSION: u32 = 1;
pub const META_ENTRY: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub steps: usize,
    pub final_loss: f64,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParameterStore,
}

impl Checkpoint {
    pub fn variant(&self) -> GatingVariant {
        self.meta.model.variant
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.meta.model.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut entries: Vec<(&str, Vec<usize>, Vec<f32>)> = vec![(
            META_ENTRY,
            vec![meta.len()],
            meta.iter().map(|&b| b as f32).collect(),
        )];
        for (name, p) in self.params.iter() {
            if name == META_ENTRY {
                return Err(Error::contract(format!("parameter name `{META_ENTRY}` is reserved")));
            }
            entries.push((name, p.value.shape().to_vec(), p.value.data().to_vec()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, shape, data) in entries {
            let len = u16::try_from(name.len()).map_err(|_| Error::contract(format!("name too long: {name}")))?;
            let rank = u8::try_from(shape.len()).map_err(|_| Error::contract(format!("rank too high: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for d in shape {
                let d = u32::try_from(d).map_err(|_| Error::contract(format!("dimension too large: {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint. Parameters are checked against the structure
    /// the stored spec implies, and trainable flags are restored from it.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let count = r.u32()? as usize;
        let mut meta = None;
        let mut params = ParameterStore::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| corrupt("entry name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt("entry size overflows"))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| corrupt("entry size overflows"))?)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if name == META_ENTRY {
                let text: Vec<u8> = data.iter().map(|&v| v as u8).collect();
                let m: CheckpointMeta =
                    serde_json::from_slice(&text).map_err(|e| corrupt(&format!("metadata: {e}")))?;
                meta = Some(m);
            } else {
                params
                    .insert(name.clone(), Tensor::new(shape, data)?, false)
                    .map_err(|_| corrupt(&format!("duplicate entry `{name}`")))?;
            }
        }
        if r.at != bytes.len() {
            return Err(corrupt("trailing bytes after the last entry"));
        }
        let meta = meta.ok_or_else(|| corrupt("no metadata entry"))?;
        let model = Model::from_parts(meta.model.clone(), params)?;
        Ok(Checkpoint {
            meta,
            params: model.params,
        })
    }
}

fn corrupt(reason: &str) -> Error {
    Error::Corruption {
        reason: reason.to_string(),
        expected: Vec::new(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(&format!("truncated at byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads a checkpoint and insists it was trained as `requested`.
pub fn load_checkpoint_as(path: &Path, requested: GatingVariant) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.variant() != requested {
        return Err(Error::VariantMismatch {
            found: ckpt.variant().as_str().into(),
            requested: requested.as_str().into(),
        });
    }
    Ok(ckpt)
}
