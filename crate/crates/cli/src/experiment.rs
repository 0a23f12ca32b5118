use std::fs;
use std::path::Path;
use std::sync::Arc;

use bbt_core::model::{Batch, FewShotTask, ToyModel};
use bbt_core::optimizer::{evaluate_metric, run_bbt, run_bbtv2, EvalApi, InProcessApi, RunError, RunHistory};
use bbt_core::service::RemoteEvalApi;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::spec::{ExperimentSpec, Method, Transport};
use crate::HarnessError;

/// Mean and sample standard deviation (`n - 1` denominator, 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

/// One completed seed, as written to `<seed>/result.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Test-split metric of the prompt chosen on dev.
    pub test_metric: f64,
    /// Lowest training loss seen.
    pub final_train_loss: f64,
    pub best_dev_metric: Option<f64>,
    pub train_calls: u64,
    pub dev_calls: u64,
    pub stopped_early: bool,
    /// Inference traffic of the run; empty for in-process runs.
    pub upload_bytes: Option<u64>,
    pub download_bytes: Option<u64>,
}

impl SeedResult {
    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Csv(e.to_string()))?;
        w.serialize(self).map_err(|e| HarnessError::Csv(e.to_string()))?;
        w.flush().map_err(|e| HarnessError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self, HarnessError> {
        let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::Csv(e.to_string()))?;
        r.deserialize()
            .next()
            .ok_or_else(|| HarnessError::Csv(format!("{} has no result row", path.display())))?
            .map_err(|e| HarnessError::Csv(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
    /// Training calls recorded before the failure.
    pub train_calls: u64,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub method: Method,
    pub metric: String,
    pub seeds: Vec<u64>,
    pub completed: Vec<SeedResult>,
    pub failures: Vec<SeedFailure>,
    /// Some seeds failed; aggregates cover the completed ones only.
    pub partial: bool,
    pub test_metric: Option<Aggregate>,
    pub final_train_loss: Option<Aggregate>,
}

impl Summary {
    fn new(spec: &ExperimentSpec, completed: Vec<SeedResult>, failures: Vec<SeedFailure>) -> Self {
        let test: Vec<f64> = completed.iter().map(|r| r.test_metric).collect();
        let loss: Vec<f64> = completed.iter().map(|r| r.final_train_loss).collect();
        Self {
            name: spec.name.clone(),
            method: spec.method,
            metric: format!("{:?}", spec.run.metric).to_lowercase(),
            seeds: spec.seeds.clone(),
            partial: !failures.is_empty(),
            test_metric: Aggregate::of(&test),
            final_train_loss: Aggregate::of(&loss),
            completed,
            failures,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Spec(e.to_string()))
    }

    /// Table-style cell such as `83.10 ± 1.25` (metric in percent).
    pub fn cell(&self) -> String {
        match self.test_metric {
            Some(a) => format!("{:.2} ± {:.2}", 100.0 * a.mean, 100.0 * a.std),
            None => "n/a".into(),
        }
    }
}

/// An inference endpoint plus, for remote runs, its traffic counters.
pub(crate) enum Backend {
    Local(InProcessApi, Arc<ToyModel>),
    Remote(RemoteEvalApi),
}

impl Backend {
    pub(crate) fn open(spec: &ExperimentSpec) -> Result<Self, HarnessError> {
        match &spec.transport {
            Transport::InProcess => {
                let model = match &spec.checkpoint {
                    Some(path) => ToyModel::load(path)?,
                    None => ToyModel::new(spec.model)?,
                };
                let model = Arc::new(model);
                Ok(Backend::Local(InProcessApi::new(Arc::clone(&model)), model))
            }
            Transport::Remote(addr) => Ok(Backend::Remote(RemoteEvalApi::connect(addr.as_str())?)),
        }
    }

    pub(crate) fn api(&self) -> &dyn EvalApi {
        match self {
            Backend::Local(api, _) => api,
            Backend::Remote(api) => api,
        }
    }

    fn traffic(&self) -> Option<(u64, u64)> {
        match self {
            Backend::Local(..) => None,
            Backend::Remote(api) => Some((api.ledger().upload_bytes(), api.ledger().download_bytes())),
        }
    }

    /// Task for one seed, laid out for the model's vocabulary. A remote
    /// model's vocabulary is taken from `ExperimentSpec::model`.
    pub(crate) fn task(&self, spec: &ExperimentSpec, seed: u64) -> Result<FewShotTask, HarnessError> {
        let config = match self {
            Backend::Local(_, model) => *model.config(),
            Backend::Remote(_) => spec.model,
        };
        let params = bbt_core::model::TaskParams {
            seed,
            ..spec.task.for_model(&config)
        };
        Ok(FewShotTask::generate(&params)?)
    }
}

/// Runs every seed of `spec` and writes
/// `<out>/<name>/<seed>/{history.csv,result.csv,best_prompt.json}` plus
/// `<out>/<name>/{summary.json,spec.toml}`.
///
/// A failing seed is recorded in the summary and the remaining seeds still
/// run; only setup and output errors abort.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Summary, HarnessError> {
    spec.validate()?;
    let dir = spec.dir();
    fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    write_text(&dir.join("spec.toml"), &spec.to_toml()?)?;
    let backend = Backend::open(spec)?;

    let mut completed = Vec::new();
    let mut failures = Vec::new();
    for &seed in &spec.seeds {
        let seed_dir = dir.join(seed.to_string());
        fs::create_dir_all(&seed_dir).map_err(|e| HarnessError::io(&seed_dir, e))?;
        match run_seed(spec, &backend, seed, &seed_dir)? {
            Ok(result) => {
                info!(
                    "{} seed {seed}: test {:.4}, train loss {:.4}",
                    spec.name, result.test_metric, result.final_train_loss
                );
                completed.push(result);
            }
            Err(failure) => {
                warn!("{} seed {seed} failed: {}", spec.name, failure.error);
                failures.push(failure);
            }
        }
    }

    let summary = Summary::new(spec, completed, failures);
    let json = serde_json::to_string_pretty(&summary).map_err(|e| HarnessError::Spec(e.to_string()))?;
    write_text(&dir.join("summary.json"), &json)?;
    Ok(summary)
}

/// Outer error: output could not be written. Inner error: the run failed.
fn run_seed(
    spec: &ExperimentSpec,
    backend: &Backend,
    seed: u64,
    dir: &Path,
) -> Result<Result<SeedResult, SeedFailure>, HarnessError> {
    let fail = |error: String, history: Option<&RunHistory>| SeedFailure {
        seed,
        error,
        train_calls: history.map_or(0, |h| h.train_calls),
    };
    let api = backend.api();
    let task = match backend.task(spec, seed) {
        Ok(t) => t,
        Err(e) => return Ok(Err(fail(e.to_string(), None))),
    };
    let before = backend.traffic();
    let cfg = bbt_core::optimizer::RunConfig {
        seed,
        ..spec.run.clone()
    };
    let outcome = Batch::from_examples(&task.train, task.classes)
        .map_err(RunError::from)
        .and_then(|train| api.layer_stats(&train).map_err(RunError::from))
        .and_then(|stats| match spec.method {
            Method::Bbt => run_bbt(api, &task, &stats[0], &cfg),
            Method::Bbtv2 => run_bbtv2(api, &task, &stats[1..], &cfg),
        });
    let outcome = match outcome {
        Ok(o) => o,
        Err(RunError::Aborted { error, history }) => {
            write_history(&history, &dir.join("history.csv"))?;
            return Ok(Err(fail(error.to_string(), Some(&history))));
        }
        Err(e) => return Ok(Err(fail(e.to_string(), None))),
    };
    write_history(&outcome.history, &dir.join("history.csv"))?;
    outcome
        .best
        .save(dir.join("best_prompt.json"))
        .map_err(|e| HarnessError::Output(e.to_string()))?;

    let test = outcome
        .best
        .payload()
        .and_then(|p| evaluate_metric(api, &p, &task.test, task.classes, cfg.metric));
    let test_metric = match test {
        Ok(t) => t,
        Err(e) => return Ok(Err(fail(format!("test evaluation: {e}"), Some(&outcome.history)))),
    };
    let after = backend.traffic();
    let traffic = before.zip(after).map(|(b, a)| (a.0 - b.0, a.1 - b.1));
    let h = &outcome.history;
    let result = SeedResult {
        seed,
        test_metric,
        final_train_loss: h.final_best_loss().unwrap_or(f64::NAN),
        best_dev_metric: outcome.best.dev_metric,
        train_calls: h.train_calls,
        dev_calls: h.dev_calls,
        stopped_early: h.stopped_early,
        upload_bytes: traffic.map(|t| t.0),
        download_bytes: traffic.map(|t| t.1),
    };
    result.write_csv(&dir.join("result.csv"))?;
    Ok(Ok(result))
}

fn write_history(history: &RunHistory, path: &Path) -> Result<(), HarnessError> {
    let file = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    history
        .write_csv(std::io::BufWriter::new(file))
        .map_err(|e| HarnessError::Output(e.to_string()))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_uses_sample_std() {
        let a = Aggregate::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(a.n, 4);
        assert!((a.mean - 2.5).abs() < 1e-15);
        assert!((a.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Aggregate::of(&[7.0]).unwrap().std, 0.0);
        assert!(Aggregate::of(&[]).is_none());
    }

    #[test]
    fn result_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("result.csv");
        for r in [
            SeedResult {
                seed: 3,
                test_metric: 0.1 + 0.2,
                final_train_loss: 1.0 / 3.0,
                best_dev_metric: None,
                train_calls: 800,
                dev_calls: 5,
                stopped_early: true,
                upload_bytes: None,
                download_bytes: None,
            },
            SeedResult {
                seed: 4,
                test_metric: 0.5,
                final_train_loss: 2e-300,
                best_dev_metric: Some(0.75),
                train_calls: 1,
                dev_calls: 0,
                stopped_early: false,
                upload_bytes: Some(123_456),
                download_bytes: Some(789),
            },
        ] {
            r.write_csv(&path).unwrap();
            assert_eq!(SeedResult::read_csv(&path).unwrap(), r);
        }
    }
}
