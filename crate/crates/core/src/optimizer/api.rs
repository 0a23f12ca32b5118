use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::model::{Batch, PromptOffsets, ToyModel};
use crate::projection::LayerStats;

/// Prompt values as they cross the API boundary: row-major `n_p × H` f32 per
/// injected layer.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptPayload {
    None,
    /// Input-layer prompt only.
    Input(Vec<f32>),
    /// One prompt per layer, replacing the prompt rows before each block.
    Deep(Vec<Vec<f32>>),
}

impl PromptPayload {
    pub fn value_count(&self) -> usize {
        match self {
            PromptPayload::None => 0,
            PromptPayload::Input(v) => v.len(),
            PromptPayload::Deep(vs) => vs.iter().map(Vec::len).sum(),
        }
    }

    /// Converts to model-side offsets.
    pub fn to_offsets(&self, prompt_len: usize, hidden: usize) -> Result<PromptOffsets, ApiError> {
        let widen = |v: &[f32]| -> Result<DMatrix<f64>, ApiError> {
            if v.len() != prompt_len * hidden {
                return Err(ApiError::Rejected(format!(
                    "prompt has {} values, model expects {prompt_len} x {hidden}",
                    v.len()
                )));
            }
            Ok(DMatrix::from_row_iterator(
                prompt_len,
                hidden,
                v.iter().map(|&x| x as f64),
            ))
        };
        Ok(match self {
            PromptPayload::None => PromptOffsets::None,
            PromptPayload::Input(v) => PromptOffsets::Input(widen(v)?),
            PromptPayload::Deep(vs) => PromptOffsets::Deep(vs.iter().map(|v| widen(v)).collect::<Result<_, _>>()?),
        })
    }
}

/// What a client needs to know to shape prompts for a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptShape {
    pub layers: usize,
    pub prompt_len: usize,
    pub hidden: usize,
}

impl PromptShape {
    pub fn values_per_layer(&self) -> usize {
        self.prompt_len * self.hidden
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApiError {
    /// The request itself is invalid; retrying cannot help.
    #[error("request rejected: {0}")]
    Rejected(String),
    /// The transport failed; the same request may succeed if retried.
    #[error("transport failure: {0}")]
    Transport(String),
}

impl ApiError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ApiError::Transport(_))
    }
}

/// A black-box inference endpoint: prompt and batch in, label-word logits out.
pub trait EvalApi: Send + Sync {
    /// One metered inference call.
    fn evaluate(&self, prompt: &PromptPayload, batch: &Batch) -> Result<Vec<Vec<f32>>, ApiError>;

    /// Number of successful `evaluate` calls so far.
    fn calls(&self) -> u64;

    fn shape(&self) -> Result<PromptShape, ApiError>;

    /// Word-embedding stats followed by per-layer hidden-state stats, from
    /// one pass over `batch` with the initial prompt. Not metered.
    fn layer_stats(&self, batch: &Batch) -> Result<Vec<LayerStats>, ApiError>;
}

/// The model called directly, with the same f32 boundary as the wire format.
#[derive(Debug)]
pub struct InProcessApi {
    model: Arc<ToyModel>,
    calls: AtomicU64,
}

impl InProcessApi {
    pub fn new(model: Arc<ToyModel>) -> Self {
        Self {
            model,
            calls: AtomicU64::new(0),
        }
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }
}

/// Runs one request against a model; shared by the in-process API and the
/// server.
pub fn serve_inference(model: &ToyModel, prompt: &PromptPayload, batch: &Batch) -> Result<Vec<Vec<f32>>, ApiError> {
    let cfg = model.config();
    let offsets = prompt.to_offsets(cfg.prompt_len, cfg.hidden)?;
    let logits = model
        .forward(&offsets, batch)
        .map_err(|e| ApiError::Rejected(e.to_string()))?;
    Ok(logits
        .into_iter()
        .map(|row| row.into_iter().map(|v| v as f32).collect())
        .collect())
}

/// Stats for the stats endpoint, computed over the given batch.
pub fn serve_stats(model: &ToyModel, batch: &Batch) -> Result<Vec<LayerStats>, ApiError> {
    model
        .batch_hidden_stats(batch)
        .map_err(|e| ApiError::Rejected(e.to_string()))
}

impl EvalApi for InProcessApi {
    fn evaluate(&self, prompt: &PromptPayload, batch: &Batch) -> Result<Vec<Vec<f32>>, ApiError> {
        let out = serve_inference(&self.model, prompt, batch)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(out)
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn shape(&self) -> Result<PromptShape, ApiError> {
        let c = self.model.config();
        Ok(PromptShape {
            layers: c.layers,
            prompt_len: c.prompt_len,
            hidden: c.hidden,
        })
    }

    fn layer_stats(&self, batch: &Batch) -> Result<Vec<LayerStats>, ApiError> {
        serve_stats(&self.model, batch)
    }
}

impl<T: EvalApi + ?Sized> EvalApi for &T {
    fn evaluate(&self, prompt: &PromptPayload, batch: &Batch) -> Result<Vec<Vec<f32>>, ApiError> {
        (**self).evaluate(prompt, batch)
    }

    fn calls(&self) -> u64 {
        (**self).calls()
    }

    fn shape(&self) -> Result<PromptShape, ApiError> {
        (**self).shape()
    }

    fn layer_stats(&self, batch: &Batch) -> Result<Vec<LayerStats>, ApiError> {
        (**self).layer_stats(batch)
    }
}
