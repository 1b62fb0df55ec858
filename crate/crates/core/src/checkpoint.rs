//! Checkpoint directories: `index.json` lists every tensor with its byte
//! range inside `tensors.adtn`, a concatenation of ADTN records.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::ModelParams;
use crate::tensor::{adtn, Tensor};
use crate::training::{Moments, OptimConfig, OptimizerState, TrainConfig};
use crate::Real;

pub const INDEX_FILE: &str = "index.json";
pub const BLOB_FILE: &str = "tensors.adtn";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Last completed 1-based epoch.
    pub epoch: usize,
    /// Iterations completed so far.
    pub iteration: usize,
    pub config_digest: String,
    pub config: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    kind: Kind,
    name: String,
    offset: usize,
    len: usize,
    /// Adam step count; zero for non-optimizer entries.
    #[serde(default)]
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Index {
    meta: CheckpointMeta,
    optimizer: OptimConfig,
    entries: Vec<Entry>,
}

/// Model, optimizer state and training position.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: ModelParams<Real>,
    pub optimizer: OptimizerState<Real>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        let mut push = |kind: Kind, name: &str, t: &Tensor<Real>, step: u64, blob: &mut Vec<u8>| -> Result<()> {
            let offset = blob.len();
            adtn::write(blob, t)?;
            entries.push(Entry { kind, name: name.to_string(), offset, len: blob.len() - offset, step });
            Ok(())
        };
        for (name, t) in &self.model.params {
            push(Kind::Param, name, t, 0, &mut blob)?;
        }
        for (name, t) in &self.model.buffers {
            push(Kind::Buffer, name, t, 0, &mut blob)?;
        }
        for (name, slot) in &self.optimizer.slots {
            let shape = [slot.m.len()];
            push(Kind::AdamM, name, &Tensor::new(&shape, slot.m.clone())?, slot.step, &mut blob)?;
            push(Kind::AdamV, name, &Tensor::new(&shape, slot.v.clone())?, slot.step, &mut blob)?;
        }
        let index = Index { meta: self.meta.clone(), optimizer: self.optimizer.config, entries };
        fs::write(dir.join(BLOB_FILE), blob)?;
        fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: Index = serde_json::from_str(&fs::read_to_string(dir.join(INDEX_FILE))?)?;
        let blob = fs::read(dir.join(BLOB_FILE))?;
        let arch = index.meta.config.arch();
        let mut model = ModelParams::<Real> { arch, params: Default::default(), buffers: Default::default() };
        let mut optimizer = OptimizerState::new(index.optimizer);
        for e in &index.entries {
            let bytes = blob
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| Error::Format(format!("entry '{}' exceeds the tensor blob", e.name)))?;
            let t: Tensor<Real> = adtn::read(&mut Cursor::new(bytes))?;
            match e.kind {
                Kind::Param => {
                    model.params.insert(e.name.clone(), t);
                }
                Kind::Buffer => {
                    model.buffers.insert(e.name.clone(), t);
                }
                Kind::AdamM | Kind::AdamV => {
                    let slot = optimizer.slots.entry(e.name.clone()).or_insert_with(|| Moments::new(0));
                    slot.step = e.step;
                    if e.kind == Kind::AdamM {
                        slot.m = t.into_data();
                    } else {
                        slot.v = t.into_data();
                    }
                }
            }
        }
        let expected = ModelParams::<Real>::init(arch, 0);
        for (name, t) in &expected.params {
            match model.params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::Format(format!("checkpoint lacks parameter '{name}' of shape {:?}", t.shape()))),
            }
        }
        Ok(Self { meta: index.meta, model, optimizer })
    }
}
