//! Experiment harness: seeded task generation, BBT/BBTv2 runs over seeds,
//! sweeps and method comparisons, written out as CSV and JSON.
//!
//! Output layout for an experiment named `name`:
//!
//! ```text
//! <out>/<name>/spec.toml
//! <out>/<name>/summary.json
//! <out>/<name>/<seed>/history.csv
//! <out>/<name>/<seed>/result.csv
//! <out>/<name>/<seed>/best_prompt.json
//! ```

mod compare;
mod experiment;
mod spec;
mod sweep;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use compare::{compare_methods, Comparison};
pub use experiment::{run_experiment, Aggregate, SeedFailure, SeedResult, Summary};
pub use spec::{ExperimentSpec, Method, Transport};
pub use sweep::{run_sweep, SweepParam, SweepRow};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("bad experiment spec: {0}")]
    Spec(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(String),
    #[error("writing results: {0}")]
    Output(String),
    #[error("specs differ in {0}; comparisons need a shared task and budget")]
    Mismatch(&'static str),
    #[error(transparent)]
    Model(#[from] bbt_core::model::ModelError),
    #[error(transparent)]
    Api(#[from] bbt_core::optimizer::ApiError),
    #[error(transparent)]
    Run(#[from] bbt_core::optimizer::RunError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
