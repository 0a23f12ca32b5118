use serde::{Deserialize, Serialize};

use super::RunError;

/// Mean negative log-likelihood of the labels under a softmax over the
/// label-word logits.
pub fn cross_entropy_loss<T: Copy + Into<f64>>(logits: &[Vec<T>], labels: &[usize]) -> Result<f64, RunError> {
    check_shapes(logits, labels)?;
    let mut total = 0.0;
    for (row, &label) in logits.iter().zip(labels) {
        let max = row.iter().map(|&v| v.into()).fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + row.iter().map(|&v| (v.into() - max).exp()).sum::<f64>().ln();
        total += log_z - row[label].into();
    }
    Ok(total / labels.len() as f64)
}

fn check_shapes<T>(logits: &[Vec<T>], labels: &[usize]) -> Result<(), RunError> {
    if labels.is_empty() {
        return Err(RunError::InvalidInput("empty batch".into()));
    }
    if logits.len() != labels.len() {
        return Err(RunError::InvalidInput(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    for (i, (row, &label)) in logits.iter().zip(labels).enumerate() {
        if label >= row.len() {
            return Err(RunError::InvalidInput(format!(
                "label {label} of example {i} outside {} logits",
                row.len()
            )));
        }
    }
    Ok(())
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax<T: Copy + Into<f64>>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v.into() > row[best].into() {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Accuracy,
    /// Binary F1 with class 1 as the positive class.
    F1,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accuracy" | "acc" => Ok(Metric::Accuracy),
            "f1" => Ok(Metric::F1),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

/// Scores argmax predictions against labels.
pub fn score<T: Copy + Into<f64>>(logits: &[Vec<T>], labels: &[usize], metric: Metric) -> Result<f64, RunError> {
    check_shapes(logits, labels)?;
    let preds: Vec<usize> = logits.iter().map(|r| argmax(r)).collect();
    match metric {
        Metric::Accuracy => {
            let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
            Ok(hits as f64 / labels.len() as f64)
        }
        Metric::F1 => {
            if logits.iter().any(|r| r.len() != 2) {
                return Err(RunError::InvalidInput("F1 needs exactly 2 classes".into()));
            }
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for (&p, &l) in preds.iter().zip(labels) {
                match (p, l) {
                    (1, 1) => tp += 1,
                    (1, 0) => fp += 1,
                    (0, 1) => fn_ += 1,
                    _ => {}
                }
            }
            if tp == 0 {
                return Ok(0.0);
            }
            Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
        }
    }
}
