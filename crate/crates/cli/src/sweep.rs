use std::fmt;
use std::fs;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::experiment::run_experiment;
use crate::spec::ExperimentSpec;
use crate::HarnessError;

/// A setting varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    Dim,
    Budget,
    PromptLen,
    Alpha,
    SigmaZ,
    Population,
    ProjectionScale,
}

impl SweepParam {
    const ALL: [SweepParam; 7] = [
        SweepParam::Dim,
        SweepParam::Budget,
        SweepParam::PromptLen,
        SweepParam::Alpha,
        SweepParam::SigmaZ,
        SweepParam::Population,
        SweepParam::ProjectionScale,
    ];

    fn name(self) -> &'static str {
        match self {
            SweepParam::Dim => "dim",
            SweepParam::Budget => "budget",
            SweepParam::PromptLen => "prompt-len",
            SweepParam::Alpha => "alpha",
            SweepParam::SigmaZ => "sigma-z",
            SweepParam::Population => "population",
            SweepParam::ProjectionScale => "projection-scale",
        }
    }

    /// Sets the parameter on a copy of `base`.
    pub fn apply(self, base: &ExperimentSpec, value: f64) -> Result<ExperimentSpec, HarnessError> {
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 && value < 2f64.powi(53) {
                Ok(value as u64)
            } else {
                Err(HarnessError::Spec(format!(
                    "{self} needs a positive integer, got {value}"
                )))
            }
        };
        let mut spec = base.clone();
        match self {
            SweepParam::Dim => spec.run.subspace_dim = count()? as usize,
            SweepParam::Budget => spec.run.budget = count()?,
            SweepParam::PromptLen => {
                if spec.checkpoint.is_some() || spec.transport != crate::Transport::InProcess {
                    return Err(HarnessError::Spec(
                        "prompt length is fixed by the model; sweep it in-process without a checkpoint".into(),
                    ));
                }
                spec.model.prompt_len = count()? as usize;
            }
            SweepParam::Alpha => spec.run.alpha = value,
            SweepParam::SigmaZ => spec.run.sigma_z = value,
            SweepParam::Population => spec.run.population = Some(count()? as usize),
            SweepParam::ProjectionScale => spec.run.projection_scale = value,
        }
        Ok(spec)
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.replace('_', "-");
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|p| p.name()).collect();
            format!("unknown sweep parameter `{s}` (one of {})", names.join(", "))
        })
    }
}

/// One line of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub experiment: String,
    pub completed: usize,
    pub failed: usize,
    pub test_mean: Option<f64>,
    pub test_std: Option<f64>,
    pub loss_mean: Option<f64>,
    pub loss_std: Option<f64>,
}

/// Runs `base` once per value, each as experiment `<param>-<value>` under
/// `<out>/<name>/`, and writes one row per value to
/// `<out>/<name>/sweep.csv`.
pub fn run_sweep(base: &ExperimentSpec, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Spec("sweep has no values".into()));
    }
    base.validate()?;
    let dir = base.dir();
    let points: Vec<ExperimentSpec> = values
        .iter()
        .map(|&v| {
            let mut spec = param.apply(base, v)?;
            spec.out = dir.clone();
            spec.name = format!("{param}-{v}");
            Ok(spec)
        })
        .collect::<Result<_, HarnessError>>()?;

    let mut rows = Vec::with_capacity(points.len());
    for (spec, &value) in points.iter().zip(values) {
        let s = run_experiment(spec)?;
        rows.push(SweepRow {
            param,
            value,
            experiment: spec.name.clone(),
            completed: s.completed.len(),
            failed: s.failures.len(),
            test_mean: s.test_metric.map(|a| a.mean),
            test_std: s.test_metric.map(|a| a.std),
            loss_mean: s.final_train_loss.map(|a| a.mean),
            loss_std: s.final_train_loss.map(|a| a.std),
        });
    }

    fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| HarnessError::Csv(e.to_string()))?;
    for row in &rows {
        w.serialize(row).map_err(|e| HarnessError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;
    Ok(rows)
}
