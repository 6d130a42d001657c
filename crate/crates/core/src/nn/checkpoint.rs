//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "DSTLCKPT"
//! version      u32
//! descriptor   u32 length + UTF-8 JSON
//! metadata     u32 length + UTF-8 JSON
//! tensor count u32
//! per tensor:  u32 name length + UTF-8 name
//!              u32 rank, rank × u64 extents
//!              f32 payload, row-major
//! ```
//!
//! Parameters are stored at float32. Loading widens to float64, so
//! save → load → save reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelDescriptor};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DSTLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Number of completed training epochs when the snapshot was taken.
    pub epoch: usize,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: ModelDescriptor,
    pub meta: CheckpointMeta,
    tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    /// Fails if a parameter does not fit in float32.
    pub fn from_model(model: &Model, meta: CheckpointMeta) -> Result<Self> {
        let mut tensors = Vec::new();
        for (name, t) in model.named_params() {
            let data: Vec<f32> = t.data().iter().map(|&v| v as f32).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("{name} has values outside the float32 range")));
            }
            tensors.push(StoredTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data,
            });
        }
        Ok(Checkpoint {
            descriptor: model.descriptor().clone(),
            meta,
            tensors,
        })
    }

    fn validate(&self) -> Result<()> {
        self.descriptor
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let want = self.descriptor.param_shapes();
        if want.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "descriptor expects {} tensors, file has {}",
                want.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in want.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match descriptor entry {name} {shape:?}",
                    t.name, t.shape
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds the model stored in this checkpoint.
    pub fn to_model(&self) -> Result<Model> {
        self.validate()?;
        let params = self
            .tensors
            .iter()
            .map(|t| Tensor::new(t.shape.clone(), t.data.iter().map(|&v| f64::from(v)).collect()))
            .collect::<Result<Vec<_>>>()?;
        Model::from_parts(self.descriptor.clone(), params)
    }

    /// Like [`Checkpoint::to_model`], but fails unless the stored descriptor
    /// equals `expected`.
    pub fn to_model_as(&self, expected: &ModelDescriptor) -> Result<Model> {
        if &self.descriptor != expected {
            let want = expected.param_shapes();
            let got = self.descriptor.param_shapes();
            return Err(Error::shape(
                "checkpoint",
                format!("expected parameters {want:?}, checkpoint holds {got:?}"),
            ));
        }
        self.to_model()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &serde_json::to_string(&self.descriptor)?);
        put_str(&mut out, &serde_json::to_string(&self.meta)?);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let descriptor: ModelDescriptor = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::Checkpoint(format!("descriptor: {e}")))?;
        let meta: CheckpointMeta = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("extent overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: size overflow")))?;
            let payload = r.take(n)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(StoredTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        let ckpt = Checkpoint {
            descriptor,
            meta,
            tensors,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>, meta: CheckpointMeta) -> Result<()> {
    Checkpoint::from_model(model, meta)?.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
    let ckpt = Checkpoint::load(path)?;
    Ok((ckpt.to_model()?, ckpt.meta))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
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
                    "truncated file: needed {n} bytes at offset {}, {} available",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}
