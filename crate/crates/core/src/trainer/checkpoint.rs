//! JSON checkpoints. Floats are written in shortest round-trip form and
//! parsed with correct rounding, so a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{MetricsReport, Model, TrainConfig};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::relabel::{RelabelRecord, SemanticTemplates};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Completed epochs.
    pub epoch: usize,
    pub config_hash: String,
    pub config: TrainConfig,
    /// Root seed; batch order and graph sampling are derived from it per epoch.
    pub rng_seed: u64,
    pub dataset_digest: String,
    pub model: Model,
    pub velocity: Model,
    pub templates: SemanticTemplates,
    /// Training labels including corrections applied so far.
    pub observed_labels: Vec<usize>,
    pub report: MetricsReport,
    pub audit: Vec<RelabelRecord>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// `(name, rows, cols)` for every parameter.
    pub fn parameter_shapes(&self) -> Vec<(&'static str, usize, usize)> {
        super::PARAM_NAMES
            .iter()
            .zip(self.model.params())
            .map(|(&name, m)| (name, m.rows(), m.cols()))
            .collect()
    }
}

/// Hash of the label-independent content of a dataset (shape, features,
/// true labels and AU bits).
pub fn dataset_digest(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    for v in [ds.classes, ds.aus, ds.dim, ds.samples.len()] {
        h.update((v as u64).to_le_bytes());
    }
    for s in &ds.samples {
        h.update((s.true_label as u64).to_le_bytes());
        for &b in &s.au_labels {
            h.update([b as u8]);
        }
        for &x in &s.features {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
