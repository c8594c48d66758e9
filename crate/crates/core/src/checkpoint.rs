//! Versioned binary checkpoints.
//!
//! Layout: the magic `ALEECKPT`, a little-endian `u32` version, a `u64`
//! header length, a JSON header (model config, schema, vocabulary and the
//! parameter table), then every parameter as little-endian `f64` in table
//! order. Parameter names carry their group prefix (`encoder.`,
//! `extractor.`, `mblp.`), so groups can be restored independently.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::TaskSchema;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::Group;
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 8] = b"ALEECKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: Group,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    schema: TaskSchema,
    vocab: Vocab,
    params: Vec<ParamEntry>,
}

pub struct Checkpoint {
    header: Header,
    data: Vec<f64>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn capture(model: &Model) -> Self {
        let mut params = Vec::new();
        let mut data = Vec::new();
        for id in model.store.ids() {
            let v = model.store.value(id);
            params.push(ParamEntry {
                name: model.store.name(id).to_string(),
                group: model.store.group(id),
                rows: v.nrows(),
                cols: v.ncols(),
                offset: data.len(),
            });
            data.extend(v.iter());
        }
        Checkpoint {
            header: Header {
                config: model.config.clone(),
                schema: model.schema.clone(),
                vocab: model.vocab.clone(),
                params,
            },
            data,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut long = [0u8; 8];
        r.read_exact(&mut long).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(long) as usize;
        if r.len() < len {
            return Err(bad("truncated header"));
        }
        let mut header: Header =
            serde_json::from_slice(&r[..len]).map_err(|e| bad(format!("header: {e}")))?;
        header.vocab.reindex();
        let body = &r[len..];
        if body.len() % 8 != 0 {
            return Err(bad("parameter data is not a whole number of f64"));
        }
        let data: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        for p in &header.params {
            if p.offset + p.rows * p.cols > data.len() {
                return Err(bad(format!("parameter {} out of bounds", p.name)));
            }
        }
        Ok(Checkpoint { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn schema(&self) -> &TaskSchema {
        &self.header.schema
    }

    pub fn config(&self) -> &ModelConfig {
        &self.header.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.header.vocab
    }

    /// Rebuild the model with the built-in encoder and every stored value.
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(&self.header.config, &self.header.schema, self.header.vocab.clone(), 0)?;
        self.restore(&mut model, &[Group::Encoder, Group::Extractor, Group::Predictor])?;
        Ok(model)
    }

    /// Overwrite the parameters of `groups` in `model`. The schema must match
    /// and every parameter of those groups must be present with its shape.
    pub fn restore(&self, model: &mut Model, groups: &[Group]) -> Result<()> {
        if model.schema != self.header.schema {
            return Err(Error::Schema("checkpoint schema differs from the model's".into()));
        }
        let mut staged = Vec::new();
        for id in model.store.ids() {
            if !groups.contains(&model.store.group(id)) {
                continue;
            }
            let name = model.store.name(id);
            let entry = self
                .header
                .params
                .iter()
                .find(|p| p.name == name)
                .ok_or_else(|| bad(format!("parameter {name} missing from checkpoint")))?;
            let shape = model.store.value(id).dim();
            if shape != (entry.rows, entry.cols) {
                return Err(bad(format!(
                    "parameter {name} is {}×{} in the checkpoint, {}×{} in the model",
                    entry.rows, entry.cols, shape.0, shape.1
                )));
            }
            let slice = &self.data[entry.offset..entry.offset + entry.rows * entry.cols];
            staged.push((id, Array2::from_shape_vec(shape, slice.to_vec()).expect("shape checked")));
        }
        for (id, v) in staged {
            *model.store.value_mut(id) = v;
        }
        Ok(())
    }
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    Checkpoint::capture(model).save(path)
}

pub fn load(path: &Path) -> Result<Model> {
    Checkpoint::read(path)?.into_model()
}
