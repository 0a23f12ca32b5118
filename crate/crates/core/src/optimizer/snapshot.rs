use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{PromptPayload, RunError};
use crate::model::DeepPrompt;
use crate::projection::{ProjectionKind, ProjectionMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Input,
    Deep,
}

/// Subspace vectors plus everything needed to regenerate their projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSnapshot {
    pub mode: PromptMode,
    pub prompt_len: usize,
    pub hidden: usize,
    pub subspace_dim: usize,
    pub projection: ProjectionKind,
    pub projection_seeds: Vec<u64>,
    pub projection_params: Vec<f64>,
    /// One vector per tuned layer.
    pub z: Vec<Vec<f64>>,
    /// Training calls used when the snapshot was taken.
    pub api_calls: u64,
    pub dev_metric: Option<f64>,
    pub train_loss: Option<f64>,
}

impl PromptSnapshot {
    pub fn projections(&self) -> Result<Vec<ProjectionMatrix>, RunError> {
        self.projection_seeds
            .iter()
            .zip(&self.projection_params)
            .map(|(&seed, &param)| {
                ProjectionMatrix::sample(
                    self.prompt_len * self.hidden,
                    self.subspace_dim,
                    self.projection,
                    param,
                    seed,
                )
                .map_err(RunError::from)
            })
            .collect()
    }

    /// Projected offsets `A_j z_j`, flat row-major `n_p × H` per layer.
    pub fn offsets(&self) -> Result<Vec<Vec<f64>>, RunError> {
        let projections = self.projections()?;
        if projections.len() != self.z.len() {
            return Err(RunError::InvalidInput("snapshot has mismatched layer counts".into()));
        }
        projections
            .iter()
            .zip(&self.z)
            .map(|(a, z)| a.apply(z).map_err(RunError::from))
            .collect()
    }

    /// The prompt exactly as the optimizer sent it to the API.
    pub fn payload(&self) -> Result<PromptPayload, RunError> {
        let narrow = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
        let mut offsets = self.offsets()?;
        Ok(match self.mode {
            PromptMode::Input => PromptPayload::Input(narrow(offsets.remove(0))),
            PromptMode::Deep => PromptPayload::Deep(offsets.into_iter().map(narrow).collect()),
        })
    }

    /// Attaches the tuned offsets to an initial deep prompt.
    pub fn to_deep_prompt(&self, initial: &DeepPrompt) -> Result<DeepPrompt, RunError> {
        if self.mode != PromptMode::Deep || initial.layers() != self.z.len() {
            return Err(RunError::InvalidInput(format!(
                "snapshot with {} {:?} layers cannot fill a {}-layer deep prompt",
                self.z.len(),
                self.mode,
                initial.layers()
            )));
        }
        let offsets = match self.payload()? {
            PromptPayload::Deep(vs) => vs
                .iter()
                .map(|v| DMatrix::from_row_iterator(self.prompt_len, self.hidden, v.iter().map(|&x| x as f64)))
                .collect(),
            _ => unreachable!(),
        };
        Ok(DeepPrompt {
            initial: initial.initial.clone(),
            offsets,
            token_ids: initial.token_ids.clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RunError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| RunError::Export(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| RunError::Export(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Export(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| RunError::Export(e.to_string()))
    }
}
