use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tensornet::Tensor;

use super::norm::NormStats;
use crate::error::{Error, Result};
use crate::model::{is_pk_param, ModelConfig, NeuralPkPd};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pk,
    Pkpd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMeta {
    pub epochs: usize,
    pub lr: f64,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model: NeuralPkPd,
    pub norm: NormStats,
    pub seed: u64,
    pub meta: TrainMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamFile {
    shape: Vec<usize>,
    data: String,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u32,
    stage: Stage,
    config: ModelConfig,
    norm: NormStats,
    seed: u64,
    params: BTreeMap<String, ParamFile>,
    meta: TrainMeta,
}

fn encode_f64(data: &[f64]) -> String {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_f64(name: &str, s: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("tensor `{name}`: byte length {} is not a multiple of 8", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl Checkpoint {
    /// Stage-pk checkpoints carry the PK tensors only.
    fn includes(&self, name: &str) -> bool {
        self.stage == Stage::Pkpd || is_pk_param(name)
    }

    pub fn to_json(&self) -> Result<String> {
        let params = self
            .model
            .store()
            .iter()
            .filter(|(_, e)| self.includes(&e.name))
            .map(|(_, e)| {
                (
                    e.name.clone(),
                    ParamFile {
                        shape: e.value.shape().to_vec(),
                        data: encode_f64(e.value.data()),
                        trainable: e.trainable,
                    },
                )
            })
            .collect();
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            stage: self.stage,
            config: self.model.config().clone(),
            norm: self.norm.clone(),
            seed: self.seed,
            params,
            meta: self.meta.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    /// Tensors absent from a stage-pk file are taken from a fresh seeded
    /// initialization.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "unsupported checkpoint version {other:?}, expected {CHECKPOINT_VERSION}"
                )))
            }
        }
        let file: CheckpointFile =
            serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("schema mismatch: {e}")))?;
        file.norm.validate()?;
        let mut model = NeuralPkPd::new(file.config.clone(), file.seed)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .store()
            .iter()
            .map(|(_, e)| (e.name.clone(), e.value.shape().to_vec()))
            .collect();
        for name in file.params.keys() {
            if !expected.iter().any(|(n, _)| n == name) {
                return Err(Error::Checkpoint(format!("unknown tensor `{name}`")));
            }
        }
        for (name, shape) in expected {
            let wanted = file.stage == Stage::Pkpd || is_pk_param(&name);
            let Some(p) = file.params.get(&name) else {
                if wanted {
                    return Err(Error::Checkpoint(format!("missing tensor `{name}`")));
                }
                continue;
            };
            if !wanted {
                return Err(Error::Checkpoint(format!("tensor `{name}` does not belong in a pk-stage checkpoint")));
            }
            if p.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    p.shape, shape
                )));
            }
            let data = decode_f64(&name, &p.data)?;
            let tensor = Tensor::new(p.shape.clone(), data)
                .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            let id = model.store().id(&name)?;
            model.store_mut().set_value(id, tensor)?;
            model.store_mut().set_trainable(id, p.trainable);
        }
        Ok(Checkpoint {
            stage: file.stage,
            model,
            norm: file.norm,
            seed: file.seed,
            meta: file.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
