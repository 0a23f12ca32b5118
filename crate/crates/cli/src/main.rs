use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use bbt_cli::{compare_methods, run_experiment, run_sweep, ExperimentSpec, Method, SweepParam, Transport};
use bbt_core::model::{Batch, FewShotTask, TaskKind, TaskParams, ToyModel};
use bbt_core::projection::ProjectionKind;
use bbt_core::service::{serve, ServerConfig};
use clap::{Args, Parser, Subcommand};

const DEFAULT_ADDR: &str = "127.0.0.1:7878";

/// Derivative-free prompt search against a toy inference service.
///
/// Settings are resolved as: built-in defaults, then `--config`, then
/// environment (`BBT_ADDR` for a bare `--transport remote` and for `serve`),
/// then command-line flags.
#[derive(Parser)]
#[command(name = "bbt", version)]
struct Cli {
    /// Log filter, e.g. `info` or `bbt_core=debug`.
    #[arg(long, global = true, env = "BBT_LOG", default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method over a list of seeds.
    Run(ExperimentArgs),
    /// Run an experiment once per value of one setting.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// dim, budget, prompt-len, alpha, sigma-z, population or projection-scale.
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Run several methods on the same task and align their loss curves.
    Compare {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',', default_value = "bbt,bbtv2")]
        methods: Vec<Method>,
    },
    /// Serve a model over TCP.
    Serve {
        #[arg(long, env = "BBT_ADDR", default_value = DEFAULT_ADDR)]
        bind: String,
        /// Model checkpoint; without one a default model is built.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Model seed when no checkpoint is given.
        #[arg(long, default_value_t = 0)]
        model_seed: u64,
        /// Largest batch accepted per request.
        #[arg(long, default_value_t = ServerConfig::default().max_batch)]
        max_batch: usize,
    },
    /// Write a generated few-shot task as JSON lines.
    GenTask {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Destination file.
        #[arg(long = "file")]
        file: PathBuf,
        /// Also write the model checkpoint here.
        #[arg(long)]
        save_model: Option<PathBuf>,
    },
    /// Print per-layer hidden-state statistics for a task's train split.
    Stats(ExperimentArgs),
}

/// Flags shared by experiment commands; each overrides the config file.
#[derive(Args, Clone, Default)]
struct ExperimentArgs {
    /// TOML file mirroring the experiment spec.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    method: Option<Method>,
    /// Comma-separated seeds.
    #[arg(long = "seed", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    budget: Option<u64>,
    /// Subspace dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Prompt tokens per layer (model setting).
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    sigma_z: Option<f64>,
    #[arg(long)]
    proj: Option<ProjectionKind>,
    #[arg(long)]
    population: Option<usize>,
    /// Training calls without dev improvement before stopping, or `none`.
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    /// `in-process`, `remote:HOST:PORT`, or `remote` for `BBT_ADDR`.
    #[arg(long)]
    transport: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate each generation's candidates concurrently.
    #[arg(long)]
    parallel: bool,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentSpec::default(),
        };
        if let Some(v) = &self.name {
            spec.name = v.clone();
        }
        if let Some(v) = self.method {
            spec.method = v;
        }
        if !self.seeds.is_empty() {
            spec.seeds = self.seeds.clone();
        }
        if let Some(v) = self.budget {
            spec.run.budget = v;
        }
        if let Some(v) = self.dim {
            spec.run.subspace_dim = v;
        }
        if let Some(v) = self.prompt_len {
            spec.model.prompt_len = v;
        }
        if let Some(v) = self.alpha {
            spec.run.alpha = v;
        }
        if let Some(v) = self.sigma_z {
            spec.run.sigma_z = v;
        }
        if let Some(v) = self.proj {
            spec.run.projection = v;
        }
        if let Some(v) = self.population {
            spec.run.population = Some(v);
        }
        if let Some(v) = &self.patience {
            spec.run.patience = match v.as_str() {
                "none" => None,
                n => Some(n.parse().with_context(|| format!("bad --patience `{n}`"))?),
            };
        }
        if let Some(kind) = self.task {
            spec.task.kind = kind;
            if kind != TaskKind::Topic && self.classes.is_none() {
                spec.task.classes = 2;
            }
        }
        if let Some(v) = self.classes {
            spec.task.classes = v;
        }
        if let Some(v) = self.shots {
            spec.task.shots = v;
        }
        match self.transport.as_deref() {
            Some("remote") => {
                let addr = std::env::var("BBT_ADDR").unwrap_or_else(|_| DEFAULT_ADDR.into());
                spec.transport = Transport::Remote(addr);
            }
            Some(t) => spec.transport = t.parse().map_err(anyhow::Error::msg)?,
            None => {}
        }
        if let Some(v) = &self.out {
            spec.out = v.clone();
        }
        if let Some(v) = &self.checkpoint {
            spec.checkpoint = Some(v.clone());
        }
        if self.parallel {
            spec.run.parallel = true;
        }
        if self.prompt_len.is_some() && (spec.checkpoint.is_some() || spec.transport != Transport::InProcess) {
            log::warn!("--prompt-len only applies to models built in-process; the served or saved model decides");
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn local_model(spec: &ExperimentSpec) -> Result<ToyModel> {
    Ok(match &spec.checkpoint {
        Some(path) => ToyModel::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ToyModel::new(spec.model)?,
    })
}

fn first_task(spec: &ExperimentSpec, model: &bbt_core::model::ToyConfig) -> Result<FewShotTask> {
    let params = TaskParams {
        seed: spec.seeds[0],
        ..spec.task.for_model(model)
    };
    Ok(FewShotTask::generate(&params)?)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();

    match cli.command {
        Command::Run(args) => {
            let spec = args.resolve()?;
            let summary = run_experiment(&spec)?;
            print_json(&summary)?;
            eprintln!("{} {}: test {}", spec.name, spec.method, summary.cell());
            if summary.completed.is_empty() {
                bail!("every seed failed");
            }
        }
        Command::Sweep { exp, param, values } => {
            let spec = exp.resolve()?;
            let rows = run_sweep(&spec, param, &values)?;
            print_json(&rows)?;
        }
        Command::Compare { exp, methods } => {
            let base = exp.resolve()?;
            if methods.is_empty() {
                bail!("--methods is empty");
            }
            let specs: Vec<ExperimentSpec> = methods
                .iter()
                .map(|&method| ExperimentSpec {
                    name: method.to_string(),
                    method,
                    out: base.dir(),
                    ..base.clone()
                })
                .collect();
            let comparison = compare_methods(&specs)?;
            comparison.write(base.dir())?;
            for (label, s) in comparison.labels.iter().zip(&comparison.summaries) {
                eprintln!("{label}: test {}", s.cell());
            }
            print_json(&comparison.summaries)?;
        }
        Command::Serve {
            bind,
            checkpoint,
            model_seed,
            max_batch,
        } => {
            let model = match checkpoint {
                Some(path) => ToyModel::load(&path).with_context(|| format!("loading {}", path.display()))?,
                None => ToyModel::new(bbt_core::model::ToyConfig {
                    seed: model_seed,
                    ..Default::default()
                })?,
            };
            let server = serve(Arc::new(model), bind.as_str(), ServerConfig { max_batch })
                .with_context(|| format!("binding {bind}"))?;
            log::info!("listening on {}", server.local_addr());
            server.wait();
        }
        Command::GenTask { exp, file, save_model } => {
            let spec = exp.resolve()?;
            let model = local_model(&spec)?;
            let task = first_task(&spec, model.config())?;
            let out = std::fs::File::create(&file).with_context(|| format!("creating {}", file.display()))?;
            task.write_jsonl(std::io::BufWriter::new(out))?;
            if let Some(path) = save_model {
                model
                    .save(&path)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            eprintln!(
                "{}: {} train, {} dev, {} test examples",
                task.name,
                task.train.len(),
                task.dev.len(),
                task.test.len()
            );
        }
        Command::Stats(args) => {
            let spec = args.resolve()?;
            let stats = match &spec.transport {
                Transport::InProcess => {
                    let model = local_model(&spec)?;
                    model.layer_hidden_stats(&first_task(&spec, model.config())?)?
                }
                Transport::Remote(addr) => {
                    use bbt_core::optimizer::EvalApi;
                    let api = bbt_core::service::RemoteEvalApi::connect(addr.as_str())?;
                    let task = first_task(&spec, &spec.model)?;
                    api.layer_stats(&Batch::from_examples(&task.train, task.classes)?)?
                }
            };
            print_json(&stats)?;
        }
    }
    Ok(())
}
