//! `fewshot` command-line tool: pretrain encoders, embed samples, solve one
//! task or evaluate many.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] fewshot::Error),
}

impl CliError {
    /// 2 usage, 3 I/O or format, 4 numeric, 5 infeasible spec.
    pub fn exit_code(&self) -> u8 {
        use fewshot::Error as E;
        match self {
            Self::Usage(_) => 2,
            Self::Io { .. } => 3,
            Self::Core(e) => match e {
                E::InvalidParameter { .. } => 2,
                E::NumericFailure(_) | E::ContractViolation(_) => 4,
                E::Infeasible(_) => 5,
                _ => 3,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fewshot", version, about = "Few-shot classification with contrastive features and graph propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the two view encoders and write them to a file.
    Pretrain(PretrainArgs),
    /// Encode samples into a feature file.
    Embed(EmbedArgs),
    /// Sample and solve a single task, printing one prediction per query.
    Solve(SolveArgs),
    /// Evaluate many sampled tasks and report mean accuracy.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration override, repeatable; applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
#[group(id = "samples", required = true, multiple = false)]
struct SampleSource {
    /// Image sample file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generated paired views, e.g. `samples=200,dim=16,noise=0.05`.
    #[arg(long, value_name = "SPEC")]
    synthetic: Option<fewshot::SyntheticPairs>,
}

#[derive(Debug, Args)]
#[group(id = "features_source", required = true, multiple = false)]
struct FeatureSource {
    /// Feature file.
    #[arg(long)]
    features: Option<PathBuf>,
    /// CSV of `label,f1,...,fd` rows.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Generated clusters, e.g. `clusters=5,sep=10,dim=64,per_class=100`.
    #[arg(long, value_name = "SPEC")]
    synthetic: Option<fewshot::SyntheticClusters>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    source: SampleSource,
    /// Encoder file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    encoder: PathBuf,
    #[command(flatten)]
    source: SampleSource,
    /// Feature file to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct TaskArgs {
    #[command(flatten)]
    source: FeatureSource,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    /// Skip mixup augmentation.
    #[arg(long)]
    no_aug: bool,
    /// Skip self-distillation.
    #[arg(long)]
    no_distill: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[command(flatten)]
    task: TaskArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    tasks: Option<usize>,
    /// Shot counts to sweep, e.g. `1,5,10`.
    #[arg(long, value_delimiter = ',', value_name = "K,...")]
    sweep_k: Vec<usize>,
    /// Evaluate all four pipeline variants on paired tasks.
    #[arg(long)]
    ablate: bool,
    /// Evaluation threads; results do not depend on it.
    #[arg(long, value_parser = clap::value_parser!(u16).range(1..))]
    workers: Option<u16>,
    /// Write the reports here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn build_config(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for pair in &common.set {
        cfg.apply_pair(pair)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v).map_err(CliError::Usage)?;
        }
    }
    Ok(cfg)
}

fn task_config(task: &TaskArgs, extra: &[(&str, Option<String>)]) -> Result<RunConfig, CliError> {
    let mut flags = vec![
        ("n", task.n.map(|v| v.to_string())),
        ("k", task.k.map(|v| v.to_string())),
        ("q", task.q.map(|v| v.to_string())),
    ];
    flags.extend_from_slice(extra);
    build_config(&task.common, &flags)
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain(a) => {
            let cfg = build_config(&a.common, &[("pretrain_epochs", a.epochs.map(|e| e.to_string()))])?;
            commands::pretrain(&cfg, &a.source.into(), &a.out, out)
        }
        Command::Embed(a) => {
            let cfg = build_config(&a.common, &[])?;
            commands::embed(&cfg, &a.encoder, &a.source.into(), &a.out, out)
        }
        Command::Solve(a) => {
            let cfg = task_config(&a.task, &[])?;
            let ablation = fewshot::Ablation::from_flags(a.task.no_aug, a.task.no_distill);
            commands::solve(&cfg, &a.task.source.into(), ablation, out)
        }
        Command::Eval(a) => {
            let cfg = task_config(&a.task, &[("tasks", a.tasks.map(|t| t.to_string()))])?;
            let opts = commands::EvalOptions {
                sweep_k: a.sweep_k,
                ablate: a.ablate,
                ablation: fewshot::Ablation::from_flags(a.task.no_aug, a.task.no_distill),
                workers: a.workers.map(usize::from),
                out: a.out,
            };
            commands::eval(&cfg, &a.task.source.into(), &opts, out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock).and_then(|()| {
        lock.flush().map_err(|e| CliError::Io {
            path: "stdout".into(),
            source: e,
        })
    }) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

impl From<SampleSource> for commands::Samples {
    fn from(s: SampleSource) -> Self {
        match (s.data, s.synthetic) {
            (Some(path), _) => Self::File(path),
            (None, Some(spec)) => Self::Synthetic(spec),
            (None, None) => unreachable!("clap requires one sample source"),
        }
    }
}

impl From<FeatureSource> for commands::Features {
    fn from(s: FeatureSource) -> Self {
        match (s.features, s.csv, s.synthetic) {
            (Some(path), _, _) => Self::File(path),
            (None, Some(path), _) => Self::Csv(path),
            (None, None, Some(spec)) => Self::Synthetic(spec),
            (None, None, None) => unreachable!("clap requires one feature source"),
        }
    }
}
