use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::RunError;

/// One metered training call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    /// Training calls used so far, including this one.
    pub api_calls: u64,
    /// Layer whose subspace vector was being searched (0 for input-only).
    pub layer: usize,
    pub train_loss: f64,
    /// Set on the last call of a sweep when the dev split was scored.
    pub dev_metric: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<HistoryRecord>,
    /// Dev metric of the starting prompt.
    pub initial_dev_metric: Option<f64>,
    pub train_calls: u64,
    /// Dev-split calls, metered separately from the budget.
    pub dev_calls: u64,
    pub stopped_early: bool,
}

impl RunHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    /// Running minimum of the training loss after each call.
    pub fn best_loss_curve(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.records
            .iter()
            .map(|r| {
                best = best.min(r.train_loss);
                best
            })
            .collect()
    }

    pub fn final_best_loss(&self) -> Option<f64> {
        self.best_loss_curve().last().copied()
    }

    /// First call count at which the running-minimum loss is at or below `target`.
    pub fn calls_to_reach(&self, target: f64) -> Option<u64> {
        let mut best = f64::INFINITY;
        for r in &self.records {
            best = best.min(r.train_loss);
            if best <= target {
                return Some(r.api_calls);
            }
        }
        None
    }

    /// Columns `api_calls,layer,train_loss,dev_metric`; the dev column is
    /// empty on rows without a dev evaluation.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), RunError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["api_calls", "layer", "train_loss", "dev_metric"])
            .map_err(|e| RunError::Export(e.to_string()))?;
        for r in &self.records {
            out.write_record([
                r.api_calls.to_string(),
                r.layer.to_string(),
                format!("{:?}", r.train_loss),
                r.dev_metric.map(|d| format!("{d:?}")).unwrap_or_default(),
            ])
            .map_err(|e| RunError::Export(e.to_string()))?;
        }
        out.flush().map_err(|e| RunError::Export(e.to_string()))
    }

    /// Reads records written by [`RunHistory::write_csv`]. Counters other
    /// than `train_calls` are not part of the CSV and come back as defaults.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, RunError> {
        let mut reader = csv::Reader::from_reader(r);
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| RunError::Export(e.to_string()))?;
            let field = |i: usize| row.get(i).unwrap_or("");
            let parse_err = |e: &dyn std::fmt::Display| RunError::Export(format!("bad history row: {e}"));
            let dev = field(3);
            records.push(HistoryRecord {
                api_calls: field(0).parse().map_err(|e| parse_err(&e))?,
                layer: field(1).parse().map_err(|e| parse_err(&e))?,
                train_loss: field(2).parse().map_err(|e| parse_err(&e))?,
                dev_metric: if dev.is_empty() {
                    None
                } else {
                    Some(dev.parse().map_err(|e| parse_err(&e))?)
                },
            });
        }
        let train_calls = records.last().map_or(0, |r| r.api_calls);
        Ok(Self {
            records,
            train_calls,
            ..Self::default()
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history is serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunHistory {
        RunHistory {
            records: vec![
                HistoryRecord {
                    api_calls: 1,
                    layer: 0,
                    train_loss: 0.9,
                    dev_metric: None,
                },
                HistoryRecord {
                    api_calls: 2,
                    layer: 0,
                    train_loss: 1.1,
                    dev_metric: Some(0.5),
                },
                HistoryRecord {
                    api_calls: 3,
                    layer: 1,
                    train_loss: 0.1 + 0.2,
                    dev_metric: Some(2.0 / 3.0),
                },
            ],
            initial_dev_metric: Some(0.25),
            train_calls: 3,
            dev_calls: 3,
            stopped_early: false,
        }
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let h = sample();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("api_calls,layer,train_loss,dev_metric\n1,0,0.9,\n"));
        let back = RunHistory::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.records, h.records);
    }

    #[test]
    fn curves() {
        let h = sample();
        assert_eq!(h.best_loss_curve(), vec![0.9, 0.9, 0.1 + 0.2]);
        assert_eq!(h.calls_to_reach(0.95), Some(1));
        assert_eq!(h.calls_to_reach(0.5), Some(3));
        assert_eq!(h.calls_to_reach(0.0), None);
        let json: RunHistory = serde_json::from_str(&h.to_json()).unwrap();
        assert_eq!(json, h);
    }
}
