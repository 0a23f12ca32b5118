//! Subspace prompt search against an inference API.
//!
//! [`run_bbt`] tunes a single input-layer prompt; [`run_bbtv2`] tunes one
//! prompt per layer, cycling bottom to top through the layers with an
//! independent CMA-ES per layer. Both share the same engine and only ever
//! see logits.

mod api;
mod history;
mod metrics;
mod run;
mod snapshot;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cma_es::CmaError;
use crate::model::ModelError;
use crate::projection::{ProjectionError, ProjectionKind};

pub use api::{serve_inference, serve_stats, ApiError, EvalApi, InProcessApi, PromptPayload, PromptShape};
pub use history::{HistoryRecord, RunHistory};
pub use metrics::{argmax, cross_entropy_loss, score, Metric};
pub use run::{evaluate_metric, run_bbt, run_bbtv2, RunOutcome};
pub use snapshot::{PromptMode, PromptSnapshot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training API calls allowed; dev evaluations are not counted.
    pub budget: u64,
    pub subspace_dim: usize,
    pub alpha: f64,
    /// Initial CMA-ES step size, shared by every layer.
    pub sigma_z: f64,
    /// CMA-ES population; `None` picks the usual default for the dimension.
    #[serde(with = "or_none")]
    pub population: Option<usize>,
    pub seed: u64,
    pub projection: ProjectionKind,
    /// Multiplies the projection parameter (σ_A or the uniform half-width).
    pub projection_scale: f64,
    /// Stop once this many training calls pass without a dev improvement.
    #[serde(with = "or_none")]
    pub patience: Option<u64>,
    /// Dev evaluation every this many full sweeps.
    pub dev_every_sweeps: u64,
    pub metric: Metric,
    /// Retries per call on transport failure before the run aborts.
    pub max_retries: u32,
    /// Evaluate the candidates of a generation concurrently.
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            budget: 8000,
            subspace_dim: 500,
            alpha: 1.0,
            sigma_z: 0.5,
            population: Some(20),
            seed: 42,
            projection: ProjectionKind::Normal,
            projection_scale: 1.0,
            patience: Some(1000),
            dev_every_sweeps: 1,
            metric: Metric::Accuracy,
            max_retries: 3,
            parallel: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::InvalidConfig(m.into()));
        if self.budget == 0 {
            return bad("budget must be positive");
        }
        if self.subspace_dim == 0 {
            return bad("subspace dimension must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.sigma_z > 0.0 && self.sigma_z.is_finite()) {
            return bad("sigma_z must be positive");
        }
        if !(self.projection_scale > 0.0 && self.projection_scale.is_finite()) {
            return bad("projection scale must be positive");
        }
        if self.population.is_some_and(|p| p < 2) {
            return bad("population must be at least 2");
        }
        if self.patience == Some(0) {
            return bad("patience must be at least 1");
        }
        if self.dev_every_sweeps == 0 {
            return bad("dev interval must be at least 1 sweep");
        }
        Ok(())
    }
}

/// Optional counts written as a number or the string `"none"`, so config
/// formats without a null can still switch them off.
mod or_none {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr<T> {
        Value(T),
        Word(String),
        Null(()),
    }

    pub fn serialize<T: Serialize, S: Serializer>(v: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => v.serialize(s),
            None => s.serialize_str("none"),
        }
    }

    pub fn deserialize<'de, T: Deserialize<'de>, D: Deserializer<'de>>(d: D) -> Result<Option<T>, D::Error> {
        match Repr::<T>::deserialize(d)? {
            Repr::Value(v) => Ok(Some(v)),
            Repr::Null(()) => Ok(None),
            Repr::Word(w) if w == "none" => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!(
                "expected a count or \"none\", got `{w}`"
            ))),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("budget {budget} is below one full sweep of {needed} calls")]
    BudgetTooSmall { budget: u64, needed: u64 },
    #[error("expected {expected} layer stats, got {got}")]
    StatsMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Api(#[from] ApiError),
    #[error(transparent)]
    Cma(#[from] CmaError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    /// The API kept failing; `history` holds everything recorded before.
    #[error("run aborted after {} training calls: {error}", history.train_calls)]
    Aborted { error: ApiError, history: Box<RunHistory> },
    #[error("export failed: {0}")]
    Export(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optional_counts_accept_none() {
        let cfg = RunConfig {
            population: None,
            patience: None,
            ..RunConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains(r#""patience":"none""#));
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        let parsed: RunConfig = serde_json::from_str(r#"{"patience": null, "population": 12}"#).unwrap();
        assert_eq!((parsed.patience, parsed.population), (None, Some(12)));
        assert!(serde_json::from_str::<RunConfig>(r#"{"patience": "never"}"#).is_err());
    }
}
