//! Flat `key = value` run configuration.
//!
//! Keys use dotted sections (`sampler.steps = 32`). Blank lines and lines
//! starting with `#` are ignored. Every key has a default, so an empty file
//! is valid; unknown keys are rejected. The resolved configuration is
//! written back in the same format, which makes a run reproducible from its
//! own output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dfm_core::paths::PathKind;
use dfm_core::schedule::{BetaSchedule, KappaSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scorer {
    LogQ,
    Match,
}

impl Scorer {
    pub fn name(&self) -> &'static str {
        match self {
            Self::LogQ => "logq",
            Self::Match => "match",
        }
    }
}

impl FromStr for Scorer {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "logq" => Ok(Self::LogQ),
            "match" => Ok(Self::Match),
            other => Err(format!("unknown scorer `{other}` (expected logq or match)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    None,
    Rate,
}

impl Corruption {
    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Rate => "rate",
        }
    }
}

impl FromStr for Corruption {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "rate" => Ok(Self::Rate),
            other => Err(format!(
                "unknown corruption `{other}` (expected none or rate)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub threads: usize,
    pub task: String,
    pub grid_side: usize,
    pub grid_noise: f64,
    pub embeddings: Option<PathBuf>,
    pub path_kind: PathKind,
    pub schedule_c: f64,
    pub schedule_a: f64,
    pub beta_cap: f64,
    pub kappa: KappaSchedule,
    pub steps: usize,
    pub chains: usize,
    pub trace_dir: Option<PathBuf>,
    pub oracle: bool,
    pub checkpoint: Option<PathBuf>,
    pub best_of: usize,
    pub keep: usize,
    pub scorer: Scorer,
    pub bestof_reps: usize,
    pub bench_chains: usize,
    pub train_steps: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub time_embedding: bool,
    pub dataset_size: usize,
    pub corrupt: Corruption,
    pub verify_rate_rows: usize,
    pub verify_continuity_trials: usize,
    pub verify_equivalence_trials: usize,
    pub verify_boundary_trials: usize,
    pub verify_marginal_times: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sched = BetaSchedule::<f64>::default();
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            threads: 0,
            task: "two_mode".into(),
            grid_side: 4,
            grid_noise: 0.1,
            embeddings: None,
            path_kind: PathKind::Metric,
            schedule_c: sched.c,
            schedule_a: sched.a,
            beta_cap: sched.beta_cap,
            kappa: KappaSchedule::Linear,
            steps: 32,
            chains: 1000,
            trace_dir: None,
            oracle: false,
            checkpoint: None,
            best_of: 8,
            keep: 1,
            scorer: Scorer::LogQ,
            bestof_reps: 200,
            bench_chains: 10_000,
            train_steps: 20_000,
            embed_dim: 8,
            hidden: 64,
            learning_rate: 0.1,
            batch_size: 32,
            time_embedding: false,
            dataset_size: 4096,
            corrupt: Corruption::None,
            verify_rate_rows: 10_000,
            verify_continuity_trials: 100,
            verify_equivalence_trials: 1000,
            verify_boundary_trials: 100,
            verify_marginal_times: 20,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("invalid value `{value}` for {key}: {e}"))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

impl RunConfig {
    /// Every recognized key, in serialization order.
    pub const KEYS: [&'static str; 35] = [
        "seed",
        "out",
        "threads",
        "task",
        "task.grid_side",
        "task.grid_noise",
        "embeddings",
        "path.kind",
        "schedule.c",
        "schedule.a",
        "schedule.beta_cap",
        "schedule.kappa",
        "sampler.steps",
        "sampler.chains",
        "sampler.trace_dir",
        "model.oracle",
        "model.checkpoint",
        "bestof.n",
        "bestof.keep",
        "bestof.scorer",
        "bestof.reps",
        "bench.chains",
        "train.steps",
        "train.embed_dim",
        "train.hidden",
        "train.learning_rate",
        "train.batch_size",
        "train.time_embedding",
        "train.dataset_size",
        "verify.corrupt",
        "verify.rate_rows",
        "verify.continuity_trials",
        "verify.equivalence_trials",
        "verify.boundary_trials",
        "verify.marginal_times",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "threads" => self.threads = parse(key, v)?,
            "task" => self.task = v.to_string(),
            "task.grid_side" => self.grid_side = parse(key, v)?,
            "task.grid_noise" => self.grid_noise = parse(key, v)?,
            "embeddings" => self.embeddings = opt_path(v),
            "path.kind" => self.path_kind = PathKind::parse(v).map_err(|e| e.to_string())?,
            "schedule.c" => self.schedule_c = parse(key, v)?,
            "schedule.a" => self.schedule_a = parse(key, v)?,
            "schedule.beta_cap" => self.beta_cap = parse(key, v)?,
            "schedule.kappa" => self.kappa = KappaSchedule::parse(v).map_err(|e| e.to_string())?,
            "sampler.steps" => self.steps = parse(key, v)?,
            "sampler.chains" => self.chains = parse(key, v)?,
            "sampler.trace_dir" => self.trace_dir = opt_path(v),
            "model.oracle" => self.oracle = parse(key, v)?,
            "model.checkpoint" => self.checkpoint = opt_path(v),
            "bestof.n" => self.best_of = parse(key, v)?,
            "bestof.keep" => self.keep = parse(key, v)?,
            "bestof.scorer" => self.scorer = parse(key, v)?,
            "bestof.reps" => self.bestof_reps = parse(key, v)?,
            "bench.chains" => self.bench_chains = parse(key, v)?,
            "train.steps" => self.train_steps = parse(key, v)?,
            "train.embed_dim" => self.embed_dim = parse(key, v)?,
            "train.hidden" => self.hidden = parse(key, v)?,
            "train.learning_rate" => self.learning_rate = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.time_embedding" => self.time_embedding = parse(key, v)?,
            "train.dataset_size" => self.dataset_size = parse(key, v)?,
            "verify.corrupt" => self.corrupt = parse(key, v)?,
            "verify.rate_rows" => self.verify_rate_rows = parse(key, v)?,
            "verify.continuity_trials" => self.verify_continuity_trials = parse(key, v)?,
            "verify.equivalence_trials" => self.verify_equivalence_trials = parse(key, v)?,
            "verify.boundary_trials" => self.verify_boundary_trials = parse(key, v)?,
            "verify.marginal_times" => self.verify_marginal_times = parse(key, v)?,
            other => return Err(format!("unknown config key `{other}`")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            "threads" => self.threads.to_string(),
            "task" => self.task.clone(),
            "task.grid_side" => self.grid_side.to_string(),
            "task.grid_noise" => self.grid_noise.to_string(),
            "embeddings" => show_path(&self.embeddings),
            "path.kind" => self.path_kind.name().to_string(),
            "schedule.c" => self.schedule_c.to_string(),
            "schedule.a" => self.schedule_a.to_string(),
            "schedule.beta_cap" => self.beta_cap.to_string(),
            "schedule.kappa" => self.kappa.name().to_string(),
            "sampler.steps" => self.steps.to_string(),
            "sampler.chains" => self.chains.to_string(),
            "sampler.trace_dir" => show_path(&self.trace_dir),
            "model.oracle" => self.oracle.to_string(),
            "model.checkpoint" => show_path(&self.checkpoint),
            "bestof.n" => self.best_of.to_string(),
            "bestof.keep" => self.keep.to_string(),
            "bestof.scorer" => self.scorer.name().to_string(),
            "bestof.reps" => self.bestof_reps.to_string(),
            "bench.chains" => self.bench_chains.to_string(),
            "train.steps" => self.train_steps.to_string(),
            "train.embed_dim" => self.embed_dim.to_string(),
            "train.hidden" => self.hidden.to_string(),
            "train.learning_rate" => self.learning_rate.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.time_embedding" => self.time_embedding.to_string(),
            "train.dataset_size" => self.dataset_size.to_string(),
            "verify.corrupt" => self.corrupt.name().to_string(),
            "verify.rate_rows" => self.verify_rate_rows.to_string(),
            "verify.continuity_trials" => self.verify_continuity_trials.to_string(),
            "verify.equivalence_trials" => self.verify_equivalence_trials.to_string(),
            "verify.boundary_trials" => self.verify_boundary_trials.to_string(),
            "verify.marginal_times" => self.verify_marginal_times.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
            self.set(key.trim(), value)
                .map_err(|e| format!("line {}: {e}", n + 1))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn beta_schedule(&self) -> Result<BetaSchedule<f64>, String> {
        BetaSchedule::new(self.schedule_c, self.schedule_a, self.beta_cap)
            .map_err(|e| e.to_string())
    }

    /// Checks value ranges that individual setters cannot.
    pub fn validate(&self) -> Result<(), String> {
        self.beta_schedule()?;
        let positive = [
            ("sampler.steps", self.steps),
            ("sampler.chains", self.chains),
            ("bestof.n", self.best_of),
            ("bestof.keep", self.keep),
            ("bestof.reps", self.bestof_reps),
            ("bench.chains", self.bench_chains),
            ("train.embed_dim", self.embed_dim),
            ("train.hidden", self.hidden),
            ("train.batch_size", self.batch_size),
            ("train.dataset_size", self.dataset_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(format!("{key} must be positive"));
            }
        }
        if self.keep > self.best_of {
            return Err(format!(
                "bestof.keep = {} exceeds bestof.n = {}",
                self.keep, self.best_of
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err("train.learning_rate must be positive and finite".into());
        }
        Ok(())
    }
}
