//! Binary checkpoint format.
//!
//! ```text
//! "TSIA"                 magic
//! u32 LE                 format version
//! u64 LE + UTF-8         TOML header: model config, optional head, metadata
//! u64 LE                 byte length of the tensor table
//!   u32 LE               tensor count
//!   per tensor:
//!     u32 LE + UTF-8     name
//!     u32 LE             rank
//!     u64 LE × rank      dims
//!     f32 LE × numel     row-major values
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::finetune::HeadSpec;
use crate::model::{ModelConfig, SiameseModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSIA";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Provenance stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub final_loss: Option<f64>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: TrainingMeta,
    model: ModelConfig,
    head: Option<HeadSpec>,
}

/// Configuration plus a named tensor table.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub head: Option<HeadSpec>,
    pub meta: TrainingMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &SiameseModel<f32>, meta: TrainingMeta) -> Self {
        Self {
            model: model.config.clone(),
            head: model.head_spec(),
            meta,
            tensors: model
                .params
                .iter()
                .map(|(_, name, t)| {
                    let plain = Tensor::new(t.dims().to_vec(), t.data().to_vec())
                        .expect("parameter shapes are valid");
                    (name.to_string(), plain)
                })
                .collect(),
        }
    }

    /// Rebuilds the stored model, head included.
    pub fn to_model(&self) -> Result<SiameseModel<f32>> {
        self.to_model_with(&self.model)
    }

    /// Loads the stored weights into a model built from `config`; every
    /// tensor must match in name and shape.
    pub fn to_model_with(&self, config: &ModelConfig) -> Result<SiameseModel<f32>> {
        let mut model = SiameseModel::<f32>::new(config.clone(), 0)?;
        if let Some(spec) = &self.head {
            model.attach_head(spec.clone(), 0)?;
        }
        for (name, tensor) in &self.tensors {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| CheckpointError::Corrupt(format!("unexpected tensor {name}")))?;
            let dst = model.params.get_mut(id);
            if dst.dims() != tensor.dims() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    found: tensor.dims().to_vec(),
                    expected: dst.dims().to_vec(),
                }
                .into());
            }
            dst.data_mut().copy_from_slice(tensor.data());
        }
        if self.tensors.len() != model.params.len() {
            let missing = model
                .params
                .iter()
                .map(|(_, n, _)| n)
                .find(|n| !self.tensors.iter().any(|(m, _)| m == n))
                .unwrap_or_default()
                .to_string();
            return Err(CheckpointError::MissingTensor(missing).into());
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = toml::to_string(&Header {
            meta: self.meta.clone(),
            model: self.model.clone(),
            head: self.head.clone(),
        })
        .expect("header serialises");
        let mut table = Vec::new();
        table.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            table.extend((name.len() as u32).to_le_bytes());
            table.extend(name.as_bytes());
            table.extend((t.dims().len() as u32).to_le_bytes());
            for &d in t.dims() {
                table.extend((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                table.extend(v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(24 + header.len() + table.len());
        out.extend(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend((header.len() as u64).to_le_bytes());
        out.extend(header.as_bytes());
        out.extend((table.len() as u64).to_le_bytes());
        out.extend(table);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = r.len("header length")?;
        let header = std::str::from_utf8(r.take(header_len, "header")?)
            .map_err(|_| CheckpointError::Corrupt("header is not UTF-8".into()))?;
        let header: Header =
            toml::from_str(header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        header
            .model
            .validate()
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let table_len = r.len("table length")?;
        let table = r.take(table_len, "tensor table")?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }

        // index the table first so nothing is allocated for a bad file
        let mut t = Reader { bytes: table, pos: 0 };
        let count = t.u32("tensor count")? as usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = t.u32("name length")? as usize;
            let name = std::str::from_utf8(t.take(name_len, "tensor name")?)
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = t.u32("rank")? as usize;
            let mut dims = Vec::new();
            for _ in 0..rank {
                dims.push(t.len("dimension")?);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n > 0 && rank > 0)
                .ok_or_else(|| CheckpointError::Corrupt(format!("bad dims {dims:?} for {name}")))?;
            let nbytes = numel
                .checked_mul(4)
                .ok_or_else(|| CheckpointError::Corrupt(format!("{name} is too large")))?;
            let data = t.take(nbytes, "tensor data")?;
            entries.push((name, dims, data));
        }
        if t.pos != table.len() {
            return Err(CheckpointError::Corrupt("tensor table has trailing bytes".into()));
        }
        let tensors = entries
            .into_iter()
            .map(|(name, dims, data)| {
                let values = data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                (name, Tensor::new(dims, values).expect("dims were validated"))
            })
            .collect();
        Ok(Self {
            model: header.model,
            head: header.head,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn len(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let b = self.take(8, what)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| CheckpointError::Corrupt(format!("{what} overflows")))
    }
}
