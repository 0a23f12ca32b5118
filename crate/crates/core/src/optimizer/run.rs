use log::{debug, info};
use rayon::prelude::*;

use super::{
    cross_entropy_loss, score, ApiError, EvalApi, HistoryRecord, Metric, PromptMode, PromptPayload, PromptShape,
    PromptSnapshot, RunConfig, RunError, RunHistory,
};
use crate::cma_es::{default_population, CmaState};
use crate::model::{Batch, Example, FewShotTask};
use crate::projection::{compute_sigma_a, uniform_half_width, LayerStats, ProjectionKind, ProjectionMatrix};

const CMA_STREAM: u64 = 0x5bd1_e995_2545_f491;

/// What a run hands back.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Best prompt on the dev split (later snapshots win ties).
    pub best: PromptSnapshot,
    /// Candidate with the lowest training loss seen.
    pub best_train: PromptSnapshot,
    /// CMA-ES means when the run ended.
    pub last: PromptSnapshot,
    pub history: RunHistory,
}

/// Tunes one input-layer prompt. `embedding_stats` sets σ_A for a normal
/// projection.
pub fn run_bbt<A: EvalApi + ?Sized>(
    api: &A,
    task: &FewShotTask,
    embedding_stats: &LayerStats,
    cfg: &RunConfig,
) -> Result<RunOutcome, RunError> {
    Engine::new(api, task, std::slice::from_ref(embedding_stats), cfg, PromptMode::Input)?.run()
}

/// Tunes one prompt per layer, alternating bottom to top. `stats[j]` are
/// the hidden-state statistics at the input of layer `j`.
pub fn run_bbtv2<A: EvalApi + ?Sized>(
    api: &A,
    task: &FewShotTask,
    stats: &[LayerStats],
    cfg: &RunConfig,
) -> Result<RunOutcome, RunError> {
    Engine::new(api, task, stats, cfg, PromptMode::Deep)?.run()
}

/// Scores a prompt on `examples` with one metered call.
pub fn evaluate_metric<A: EvalApi + ?Sized>(
    api: &A,
    prompt: &PromptPayload,
    examples: &[Example],
    classes: usize,
    metric: Metric,
) -> Result<f64, RunError> {
    if examples.is_empty() {
        return Err(RunError::InvalidInput("cannot score an empty dataset".into()));
    }
    if metric == Metric::F1 && classes != 2 {
        return Err(RunError::InvalidInput(format!(
            "F1 needs 2 classes, task has {classes}"
        )));
    }
    let batch = Batch::from_examples(examples, classes)?;
    let logits = api.evaluate(prompt, &batch)?;
    score(&logits, &FewShotTask::labels(examples), metric)
}

fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

struct Layer {
    projection: ProjectionMatrix,
    cma: CmaState,
    z: Vec<f64>,
    /// `A z` at f32, as sent.
    offset: Vec<f32>,
}

struct Engine<'a, A: EvalApi + ?Sized> {
    api: &'a A,
    cfg: &'a RunConfig,
    mode: PromptMode,
    shape: PromptShape,
    layers: Vec<Layer>,
    train: Batch,
    train_labels: Vec<usize>,
    dev: Batch,
    dev_labels: Vec<usize>,
    history: RunHistory,
}

impl<'a, A: EvalApi + ?Sized> Engine<'a, A> {
    fn new(
        api: &'a A,
        task: &FewShotTask,
        stats: &[LayerStats],
        cfg: &'a RunConfig,
        mode: PromptMode,
    ) -> Result<Self, RunError> {
        cfg.validate()?;
        if task.classes < 2 {
            return Err(RunError::InvalidInput(format!(
                "task has {} class; the loss would be constant",
                task.classes
            )));
        }
        if task.train.is_empty() || task.dev.is_empty() {
            return Err(RunError::InvalidInput(
                "task needs non-empty train and dev splits".into(),
            ));
        }
        if cfg.metric == Metric::F1 && task.classes != 2 {
            return Err(RunError::InvalidInput("F1 needs a 2-class task".into()));
        }
        let shape = api.shape()?;
        let n_layers = match mode {
            PromptMode::Input => 1,
            PromptMode::Deep => shape.layers,
        };
        if stats.len() != n_layers {
            return Err(RunError::StatsMismatch {
                expected: n_layers,
                got: stats.len(),
            });
        }
        let lambda = cfg.population.unwrap_or_else(|| default_population(cfg.subspace_dim));
        let needed = (lambda * n_layers) as u64;
        if cfg.budget < needed {
            return Err(RunError::BudgetTooSmall {
                budget: cfg.budget,
                needed,
            });
        }

        let rows = shape.values_per_layer();
        let layers = stats
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let base = match cfg.projection {
                    ProjectionKind::Normal => compute_sigma_a(cfg.alpha, s.sigma_hat, cfg.subspace_dim, cfg.sigma_z)?,
                    ProjectionKind::Uniform => uniform_half_width(cfg.subspace_dim),
                };
                let projection = ProjectionMatrix::sample(
                    rows,
                    cfg.subspace_dim,
                    cfg.projection,
                    base * cfg.projection_scale,
                    cfg.seed.wrapping_add(j as u64),
                )?;
                let cma_seed = mix(cfg.seed ^ CMA_STREAM).wrapping_add(j as u64);
                let cma = CmaState::new(cfg.subspace_dim, cfg.sigma_z, Some(lambda), cma_seed)?;
                Ok(Layer {
                    projection,
                    cma,
                    z: vec![0.0; cfg.subspace_dim],
                    offset: vec![0.0; rows],
                })
            })
            .collect::<Result<Vec<_>, RunError>>()?;

        Ok(Self {
            api,
            cfg,
            mode,
            shape,
            layers,
            train: Batch::from_examples(&task.train, task.classes)?,
            train_labels: FewShotTask::labels(&task.train),
            dev: Batch::from_examples(&task.dev, task.classes)?,
            dev_labels: FewShotTask::labels(&task.dev),
            history: RunHistory::default(),
        })
    }

    fn payload(&self, replace: Option<(usize, Vec<f32>)>) -> PromptPayload {
        let pick = |j: usize, l: &Layer| match &replace {
            Some((r, v)) if *r == j => v.clone(),
            _ => l.offset.clone(),
        };
        match self.mode {
            PromptMode::Input => PromptPayload::Input(pick(0, &self.layers[0])),
            PromptMode::Deep => PromptPayload::Deep(self.layers.iter().enumerate().map(|(j, l)| pick(j, l)).collect()),
        }
    }

    fn snapshot(&self, z: Vec<Vec<f64>>, dev_metric: Option<f64>, train_loss: Option<f64>) -> PromptSnapshot {
        PromptSnapshot {
            mode: self.mode,
            prompt_len: self.shape.prompt_len,
            hidden: self.shape.hidden,
            subspace_dim: self.cfg.subspace_dim,
            projection: self.cfg.projection,
            projection_seeds: self.layers.iter().map(|l| l.projection.seed()).collect(),
            projection_params: self.layers.iter().map(|l| l.projection.param()).collect(),
            z,
            api_calls: self.history.train_calls,
            dev_metric,
            train_loss,
        }
    }

    fn current_z(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| l.z.clone()).collect()
    }

    fn call(&self, payload: &PromptPayload, batch: &Batch) -> Result<Vec<Vec<f32>>, ApiError> {
        let mut attempt = 0;
        loop {
            match self.api.evaluate(payload, batch) {
                Ok(out) => return Ok(out),
                Err(e) if e.is_retryable() && attempt < self.cfg.max_retries => {
                    attempt += 1;
                    debug!("retrying after {e} (attempt {attempt})");
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn abort(&self, error: ApiError) -> RunError {
        match error {
            ApiError::Transport(_) => RunError::Aborted {
                error,
                history: Box::new(self.history.clone()),
            },
            other => RunError::Api(other),
        }
    }

    fn dev_metric(&mut self) -> Result<f64, RunError> {
        let payload = self.payload(None);
        let logits = self.call(&payload, &self.dev).map_err(|e| self.abort(e))?;
        self.history.dev_calls += 1;
        score(&logits, &self.dev_labels, self.cfg.metric)
    }

    fn run(mut self) -> Result<RunOutcome, RunError> {
        let n_layers = self.layers.len();
        let lambda = self.layers[0].cma.population();
        let sweeps = self.cfg.budget / (lambda * n_layers) as u64;

        let initial_dev = self.dev_metric()?;
        self.history.initial_dev_metric = Some(initial_dev);
        let mut best = self.snapshot(self.current_z(), Some(initial_dev), None);
        let mut best_train: Option<PromptSnapshot> = None;
        let mut best_dev = initial_dev;
        let mut last_improvement = 0u64;
        info!(
            "{:?} run: {n_layers} layer(s), lambda {lambda}, {sweeps} sweeps, initial dev {initial_dev:.4}",
            self.mode
        );

        'sweeps: for sweep in 0..sweeps {
            for j in 0..n_layers {
                let candidates = self.layers[j].cma.ask();
                let payloads: Vec<PromptPayload> = candidates
                    .iter()
                    .map(|c| {
                        let offset = self.layers[j]
                            .projection
                            .apply(c)?
                            .into_iter()
                            .map(|v| v as f32)
                            .collect();
                        Ok(self.payload(Some((j, offset))))
                    })
                    .collect::<Result<_, RunError>>()?;
                let results: Vec<Result<Vec<Vec<f32>>, ApiError>> = if self.cfg.parallel {
                    payloads.par_iter().map(|p| self.call(p, &self.train)).collect()
                } else {
                    let mut out = Vec::with_capacity(payloads.len());
                    for p in &payloads {
                        let r = self.call(p, &self.train);
                        let failed = r.is_err();
                        out.push(r);
                        if failed {
                            break;
                        }
                    }
                    out
                };
                let mut losses = Vec::with_capacity(candidates.len());
                for r in results {
                    let logits = r.map_err(|e| self.abort(e))?;
                    losses.push(cross_entropy_loss(&logits, &self.train_labels)?);
                }
                for (k, &loss) in losses.iter().enumerate() {
                    self.history.train_calls += 1;
                    self.history.records.push(HistoryRecord {
                        api_calls: self.history.train_calls,
                        layer: j,
                        train_loss: loss,
                        dev_metric: None,
                    });
                    if best_train
                        .as_ref()
                        .is_none_or(|b| loss < b.train_loss.unwrap_or(f64::INFINITY))
                    {
                        let mut z = self.current_z();
                        z[j] = candidates[k].clone();
                        best_train = Some(self.snapshot(z, None, Some(loss)));
                    }
                }
                self.layers[j].cma.tell(&candidates, &losses)?;
                let layer = &mut self.layers[j];
                layer.z = layer.cma.mean().to_vec();
                layer.offset = layer
                    .projection
                    .apply(&layer.z)?
                    .into_iter()
                    .map(|v| v as f32)
                    .collect();
            }

            if (sweep + 1) % self.cfg.dev_every_sweeps == 0 {
                let dev = self.dev_metric()?;
                if let Some(r) = self.history.records.last_mut() {
                    r.dev_metric = Some(dev);
                }
                if dev > best_dev {
                    last_improvement = self.history.train_calls;
                }
                if dev >= best_dev {
                    best_dev = dev;
                    best = self.snapshot(self.current_z(), Some(dev), None);
                }
                debug!(
                    "sweep {}: calls {}, dev {dev:.4}, best dev {best_dev:.4}",
                    sweep + 1,
                    self.history.train_calls
                );
                if let Some(p) = self.cfg.patience {
                    if self.history.train_calls - last_improvement >= p {
                        info!("early stop after {} calls", self.history.train_calls);
                        self.history.stopped_early = true;
                        break 'sweeps;
                    }
                }
            }
        }

        let last = self.snapshot(self.current_z(), None, None);
        let best_train = best_train.expect("at least one generation ran");
        Ok(RunOutcome {
            best,
            best_train,
            last,
            history: self.history,
        })
    }
}
