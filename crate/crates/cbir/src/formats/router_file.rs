//! Router JSON: the softmax weights plus how they were trained.

use std::path::Path;

use cbir_core::catalog::TlcId;
use cbir_core::router::{SoftmaxRouter, TrainConfig};
use serde::{Deserialize, Serialize};

use super::{read_file, write_file};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub config: TrainConfig,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub holdout_fraction: f64,
    pub heldout_accuracy: f64,
    pub train_samples: usize,
    pub heldout_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterFile {
    pub class_labels: Vec<TlcId>,
    pub dim: usize,
    /// Row-major `C × dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingMeta>,
}

impl RouterFile {
    pub fn new(router: &SoftmaxRouter, training: Option<TrainingMeta>) -> Self {
        RouterFile {
            class_labels: router.class_labels.clone(),
            dim: router.dim,
            weights: router.weights.clone(),
            bias: router.bias.clone(),
            training,
        }
    }

    pub fn router(&self) -> Result<SoftmaxRouter> {
        let r = SoftmaxRouter {
            class_labels: self.class_labels.clone(),
            dim: self.dim,
            weights: self.weights.clone(),
            bias: self.bias.clone(),
        };
        r.validate()?;
        Ok(r)
    }
}

pub fn save_router(path: &Path, file: &RouterFile) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(file)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn load_router(path: &Path) -> Result<RouterFile> {
    let file: RouterFile = serde_json::from_slice(&read_file(path)?)?;
    file.router()?;
    Ok(file)
}
