use std::fmt;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;

use super::Batch;

const ENTRIES: usize = 2;

struct Entry {
    batch: Batch,
    prompts: Vec<DMatrix<f64>>,
    /// `inputs[j]` is the token block entering layer `j`.
    inputs: Vec<Arc<DMatrix<f64>>>,
}

/// Token hidden states of recent forward passes.
///
/// Token states entering layer `j` depend only on the batch and on the prompt
/// rows of layers below `j`, so a pass that shares those with a cached pass
/// can start at layer `j`. Results are bitwise identical to a full pass.
#[derive(Default)]
pub(crate) struct PrefixCache {
    entries: Mutex<Vec<Entry>>,
}

impl PrefixCache {
    /// The cached layer inputs `0..=k` for the deepest reusable `k ≥ 1`.
    pub(crate) fn lookup(&self, batch: &Batch, prompts: &[DMatrix<f64>]) -> Vec<Arc<DMatrix<f64>>> {
        let entries = self.entries.lock().expect("cache lock");
        let Some(e) = entries.iter().find(|e| &e.batch == batch) else {
            return Vec::new();
        };
        let shared = e.prompts.iter().zip(prompts).take_while(|(a, b)| a == b).count();
        let k = shared.min(e.inputs.len().saturating_sub(1));
        if k == 0 {
            return Vec::new();
        }
        e.inputs[..=k].to_vec()
    }

    pub(crate) fn store(&self, batch: &Batch, prompts: &[DMatrix<f64>], inputs: Vec<Arc<DMatrix<f64>>>) {
        let mut entries = self.entries.lock().expect("cache lock");
        if let Some(i) = entries.iter().position(|e| &e.batch == batch) {
            entries.remove(i);
        } else if entries.len() >= ENTRIES {
            entries.remove(0);
        }
        entries.push(Entry {
            batch: batch.clone(),
            prompts: prompts.to_vec(),
            inputs,
        });
    }
}

impl Clone for PrefixCache {
    fn clone(&self) -> Self {
        Self::default()
    }
}

impl PartialEq for PrefixCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl fmt::Debug for PrefixCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.entries.lock().map_or(0, |e| e.len());
        write!(f, "PrefixCache({n} entries)")
    }
}
