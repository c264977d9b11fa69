//! Versioned JSON checkpoints holding the model config, named tensors, the
//! training-stage tag and optional RNG state. Floats are written in
//! shortest round-trip form, so reloads are bit-exact.

use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Layout, ModelConfig, PolicyParams};
use crate::error::{Error, Result};
use crate::io;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |what: &str| Error::Config(format!("bad rng state: {what}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed is not 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    stage: String,
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
    #[serde(default)]
    rng: Option<RngState>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub params: PolicyParams,
    pub rng: Option<RngState>,
    /// Free-form provenance (iteration, validation score, parent file...).
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(stage: impl Into<String>, params: PolicyParams) -> Self {
        Checkpoint {
            stage: stage.into(),
            params,
            rng: None,
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_json(&self) -> String {
        let p = &self.params;
        let file = CheckpointFile {
            version: CHECKPOINT_FORMAT_VERSION,
            stage: self.stage.clone(),
            config: p.config.clone(),
            tensors: p
                .layout
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: p.values[t.range.clone()].to_vec(),
                })
                .collect(),
            rng: self.rng.clone(),
            meta: self.meta.clone(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|source| Error::Format {
            path: origin.to_path_buf(),
            source,
        })?;
        let bad = |m: String| Error::Config(format!("{}: {m}", origin.display()));
        if file.version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", file.version)));
        }
        file.config.validate()?;
        let layout = Layout::new(&file.config);
        if layout.tensors.len() != file.tensors.len() {
            return Err(bad("tensor count does not match the config".into()));
        }
        let mut values = vec![0.0; layout.total];
        for (info, t) in layout.tensors.iter().zip(&file.tensors) {
            if info.name != t.name || info.shape != t.shape || t.data.len() != info.range.len() {
                return Err(bad(format!("tensor {} does not match the layout", t.name)));
            }
            values[info.range.clone()].copy_from_slice(&t.data);
        }
        Ok(Checkpoint {
            stage: file.stage,
            params: PolicyParams {
                config: file.config,
                layout: Arc::new(layout),
                values,
            },
            rng: file.rng,
            meta: file.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact {
                    path: path.to_path_buf(),
                    reason: "checkpoint does not exist".into(),
                }
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_json(&text, path)
    }
}
