use std::collections::HashSet;
use std::fs;
use std::path::Path;

use bbt_core::optimizer::RunHistory;

use crate::experiment::{run_experiment, write_text, Summary};
use crate::spec::ExperimentSpec;
use crate::HarnessError;

/// Several experiments on one task and budget, aligned by API call.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// Column names, one per spec; repeated names get a `-2`, `-3`, ... suffix.
    pub labels: Vec<String>,
    pub summaries: Vec<Summary>,
    /// Training calls `1..=budget`.
    pub steps: Vec<u64>,
    /// `curves[i][k]`: best training loss after `steps[k]` calls, averaged
    /// over the completed seeds of spec `i`. `None` once any of those seeds
    /// has stopped.
    pub curves: Vec<Vec<Option<f64>>>,
}

/// Runs each spec with [`run_experiment`] (under its label rather than its
/// name) and aligns their loss curves.
pub fn compare_methods(specs: &[ExperimentSpec]) -> Result<Comparison, HarnessError> {
    let first = specs
        .first()
        .ok_or_else(|| HarnessError::Spec("nothing to compare".into()))?;
    for s in &specs[1..] {
        if s.run.budget != first.run.budget {
            return Err(HarnessError::Mismatch("budget"));
        }
        if s.task != first.task {
            return Err(HarnessError::Mismatch("task"));
        }
    }

    let mut seen = HashSet::new();
    let mut labels = Vec::with_capacity(specs.len());
    for s in specs {
        let mut label = s.name.clone();
        let mut k = 1;
        while !seen.insert((s.out.clone(), label.clone())) {
            k += 1;
            label = format!("{}-{k}", s.name);
        }
        labels.push(label);
    }

    let budget = first.run.budget;
    let steps: Vec<u64> = (1..=budget).collect();
    let mut summaries = Vec::with_capacity(specs.len());
    let mut curves = Vec::with_capacity(specs.len());
    for (spec, label) in specs.iter().zip(&labels) {
        let spec = ExperimentSpec {
            name: label.clone(),
            ..spec.clone()
        };
        let summary = run_experiment(&spec)?;
        let mut histories = Vec::with_capacity(summary.completed.len());
        for r in &summary.completed {
            histories.push(read_history(&spec.dir().join(r.seed.to_string()).join("history.csv"))?);
        }
        curves.push(mean_curve(&histories, budget));
        summaries.push(summary);
    }
    Ok(Comparison {
        labels,
        summaries,
        steps,
        curves,
    })
}

fn read_history(path: &Path) -> Result<RunHistory, HarnessError> {
    let file = fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    RunHistory::read_csv(std::io::BufReader::new(file)).map_err(|e| HarnessError::Csv(e.to_string()))
}

fn mean_curve(histories: &[RunHistory], budget: u64) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; budget as usize];
    let mut count = vec![0usize; budget as usize];
    for h in histories {
        let mut best = f64::INFINITY;
        for r in &h.records {
            best = best.min(r.train_loss);
            if let Some(k) = (r.api_calls as usize).checked_sub(1).filter(|&k| k < sum.len()) {
                sum[k] += best;
                count[k] += 1;
            }
        }
    }
    let n = histories.len();
    sum.into_iter()
        .zip(count)
        .map(|(s, c)| (n > 0 && c == n).then(|| s / n as f64))
        .collect()
}

impl Comparison {
    /// Writes `curves.csv` (one loss column per label) and `final.csv` (one
    /// row per label) into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), HarnessError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let csv_err = |e: csv::Error| HarnessError::Csv(e.to_string());

        let path = dir.join("curves.csv");
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        let header: Vec<&str> = std::iter::once("api_calls")
            .chain(self.labels.iter().map(String::as_str))
            .collect();
        w.write_record(&header).map_err(csv_err)?;
        for (k, step) in self.steps.iter().enumerate() {
            let row = std::iter::once(step.to_string()).chain(
                self.curves
                    .iter()
                    .map(|c| c[k].map(|v| format!("{v:?}")).unwrap_or_default()),
            );
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| HarnessError::io(&path, e))?;

        let path = dir.join("final.csv");
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record([
            "label",
            "method",
            "completed",
            "failed",
            "test_mean",
            "test_std",
            "loss_mean",
            "loss_std",
        ])
        .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
        for (label, s) in self.labels.iter().zip(&self.summaries) {
            w.write_record([
                label.clone(),
                s.method.to_string(),
                s.completed.len().to_string(),
                s.failures.len().to_string(),
                opt(s.test_metric.map(|a| a.mean)),
                opt(s.test_metric.map(|a| a.std)),
                opt(s.final_train_loss.map(|a| a.mean)),
                opt(s.final_train_loss.map(|a| a.std)),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| HarnessError::io(&path, e))?;

        let json = serde_json::to_string_pretty(&self.summaries).map_err(|e| HarnessError::Output(e.to_string()))?;
        write_text(&dir.join("summaries.json"), &json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bbt_core::optimizer::HistoryRecord;

    fn history(losses: &[f64]) -> RunHistory {
        RunHistory {
            records: losses
                .iter()
                .enumerate()
                .map(|(i, &train_loss)| HistoryRecord {
                    api_calls: i as u64 + 1,
                    layer: 0,
                    train_loss,
                    dev_metric: None,
                })
                .collect(),
            train_calls: losses.len() as u64,
            ..RunHistory::default()
        }
    }

    #[test]
    fn curve_averages_running_minimum() {
        let c = mean_curve(&[history(&[3.0, 1.0, 2.0, 0.5]), history(&[1.0, 2.0, 0.0])], 4);
        assert_eq!(c, vec![Some(2.0), Some(1.0), Some(0.5), None]);
        assert_eq!(mean_curve(&[], 2), vec![None, None]);
    }
}
