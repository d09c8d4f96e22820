//! `dfm`: verification, training, sampling, benchmarking and best-of-N for
//! discrete flow matching on toy tasks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "dfm", version, about = "Discrete flow matching toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Overrides,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Run the residual suite and write one CSV report per check group.
    Verify,
    /// Train the factorized denoiser; writes model.ckpt and loss.csv.
    Train,
    /// Sample chains from a checkpoint or the exact denoiser.
    Sample,
    /// Sweep step counts and record quality and throughput.
    Bench,
    /// Best-of-N selection against a task scorer.
    Bestof,
}

/// Flags override values from `--config`; each one maps to a config key.
#[derive(Debug, Args)]
struct Overrides {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<String>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<String>,
    /// Built-in task name.
    #[arg(long, global = true)]
    task: Option<String>,
    #[arg(long, global = true)]
    grid_side: Option<String>,
    /// Token embedding file replacing the task's default geometry.
    #[arg(long, global = true)]
    embeddings: Option<String>,
    /// Probability path kind: metric or mixture.
    #[arg(long, global = true)]
    path: Option<String>,
    #[arg(long, global = true)]
    steps: Option<String>,
    #[arg(long, global = true)]
    chains: Option<String>,
    /// Directory receiving one trace CSV per chain.
    #[arg(long, global = true)]
    trace_dir: Option<String>,
    /// Use the exact Bayes denoiser instead of a checkpoint.
    #[arg(long, global = true)]
    oracle: bool,
    #[arg(long, global = true)]
    checkpoint: Option<String>,
    /// Candidates per best-of-N draw.
    #[arg(long, global = true)]
    best_of: Option<String>,
    #[arg(long, global = true)]
    keep: Option<String>,
    /// Best-of-N scorer: logq or match.
    #[arg(long, global = true)]
    scorer: Option<String>,
    /// Best-of-N repetitions.
    #[arg(long, global = true)]
    reps: Option<String>,
    #[arg(long, global = true)]
    train_steps: Option<String>,
    /// Inject a fault into the verify suite (`rate` flips a rate sign).
    #[arg(long, global = true)]
    corrupt: Option<String>,
    /// Arbitrary `key=value` override; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig, String> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let pairs = [
            ("seed", &self.seed),
            ("out", &self.out),
            ("threads", &self.threads),
            ("task", &self.task),
            ("task.grid_side", &self.grid_side),
            ("embeddings", &self.embeddings),
            ("path.kind", &self.path),
            ("sampler.steps", &self.steps),
            ("sampler.chains", &self.chains),
            ("sampler.trace_dir", &self.trace_dir),
            ("model.checkpoint", &self.checkpoint),
            ("bestof.n", &self.best_of),
            ("bestof.keep", &self.keep),
            ("bestof.scorer", &self.scorer),
            ("bestof.reps", &self.reps),
            ("train.steps", &self.train_steps),
            ("verify.corrupt", &self.corrupt),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if self.oracle {
            cfg.oracle = true;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match cli.common.resolve() {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    if cfg.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
        {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Verify => commands::verify(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Sample => commands::sample(&cfg),
        Command::Bench => commands::bench(&cfg),
        Command::Bestof => commands::bestof(&cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
