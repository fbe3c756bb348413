//! Model checkpoints: a JSON document with a format tag and version, the
//! training and model configuration, and every named parameter tensor.
//!
//! ```text
//! {
//!   "format": "braintap-checkpoint",
//!   "version": 1,
//!   "train": { ...TrainConfig keys... },
//!   "model": { ...ModelConfig keys... },
//!   "params": [ { "name": "fc.embed.0.weight", "rows": 20, "cols": 64, "data": [...] }, ... ]
//! }
//! ```
//!
//! Floats are written in shortest round-trip form, so a saved model reloads
//! bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{BrainTap, ModelConfig};
use crate::tensor::Tensor;

pub const FORMAT: &str = "braintap-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    train: TrainConfig,
    model: ModelConfig,
    params: Vec<ParamRecord>,
}

/// A trained model together with the configuration that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub model: BrainTap,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let doc = Document {
            format: FORMAT.to_string(),
            version: VERSION,
            train: self.train.clone(),
            model: self.model.config.clone(),
            params: self
                .model
                .params
                .iter()
                .map(|(_, name, t)| ParamRecord {
                    name: name.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&doc).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if doc.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown format '{}'",
                doc.format
            )));
        }
        if doc.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {VERSION})",
                doc.version
            )));
        }
        let mut model = BrainTap::new(doc.model, 0)?;
        if doc.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameter tensors, model has {}",
                doc.params.len(),
                model.params.len()
            )));
        }
        for (i, rec) in doc.params.into_iter().enumerate() {
            let id = crate::params::ParamId(i);
            let expected = model.params.get(id);
            if rec.name != model.params.name(id) || [rec.rows, rec.cols] != expected.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {i} is '{}' {}x{}, expected '{}' {:?}",
                    rec.name,
                    rec.rows,
                    rec.cols,
                    model.params.name(id),
                    expected.shape()
                )));
            }
            let t = Tensor::new(rec.rows, rec.cols, rec.data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            *model.params.get_mut(id) = t;
        }
        Ok(Self {
            train: doc.train,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
