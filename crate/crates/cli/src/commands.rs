use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::info;

use dfm_core::data::{builtin_task_with, TaskMode, TaskOptions, ToyTask};
use dfm_core::denoiser::{
    read_checkpoint, Denoiser, FactorizedModel, Hyperparameters, ModelShape, Trainer,
};
use dfm_core::paths::{ConditionalPath, JointDistribution};
use dfm_core::rng::substream;
use dfm_core::sampler::{best_of_n, sample_chains, SampleOutput, SamplerConfig};
use dfm_core::token_space::load_embeddings;
use dfm_core::verify::{empirical_tv, reports_csv, run_suite, SuiteConfig};
use dfm_core::Error;

use crate::config::{Corruption, RunConfig, Scorer};

pub const RESOLVED_CONFIG: &str = "resolved.cfg";
pub const BENCH_STEPS: [usize; 6] = [4, 8, 16, 32, 64, 128];

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config values or incompatible options.
    Usage(String),
    /// A check ran and did not pass.
    Check(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Check(_) | Self::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "{m}"),
            Self::Check(m) => write!(f, "check failed: {m}"),
            Self::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(Error::Io(e))
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn write_file(dir: &Path, name: &str, contents: &str) -> CliResult {
    fs::write(dir.join(name), contents).map_err(|e| {
        CliError::Core(Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", dir.join(name).display()),
        )))
    })
}

fn prepare_out(cfg: &RunConfig) -> CliResult {
    fs::create_dir_all(&cfg.out)?;
    write_file(&cfg.out, RESOLVED_CONFIG, &cfg.to_text())
}

fn join_tokens(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

fn load_task(cfg: &RunConfig) -> CliResult<ToyTask> {
    let opts = TaskOptions {
        grid_side: cfg.grid_side,
        grid_noise: cfg.grid_noise,
    };
    let mut task =
        builtin_task_with(&cfg.task, opts).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(path) = &cfg.embeddings {
        let space = load_embeddings::<f64>(path, task.space.special())
            .map_err(|e| CliError::Usage(format!("embeddings {}: {e}", path.display())))?;
        if space.k() != task.k() {
            return Err(CliError::Usage(format!(
                "embeddings define {} tokens but task {} has K = {}",
                space.k(),
                task.name,
                task.k()
            )));
        }
        task.space = space;
    }
    Ok(task)
}

fn build_path(cfg: &RunConfig, task: &ToyTask) -> CliResult<ConditionalPath<f64>> {
    let beta = cfg.beta_schedule().map_err(CliError::Usage)?;
    task.path(cfg.path_kind, beta, cfg.kappa)
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn load_denoiser(
    cfg: &RunConfig,
    task: &ToyTask,
    path: &ConditionalPath<f64>,
) -> CliResult<Box<dyn Denoiser<f64>>> {
    if cfg.oracle {
        return match task.oracle(path) {
            Ok(o) => Ok(Box::new(o)),
            Err(e @ Error::Capacity { .. }) => Err(CliError::Usage(format!(
                "the exact denoiser needs an enumerable task: {e}"
            ))),
            Err(e) => Err(e.into()),
        };
    }
    let ckpt = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("no model: pass --checkpoint <file> or --oracle".into()))?;
    let text = fs::read_to_string(ckpt)
        .map_err(|e| CliError::Usage(format!("checkpoint {}: {e}", ckpt.display())))?;
    let model = read_checkpoint(&text)?;
    let expected = ModelShape {
        k: path.k(),
        cond_len: task.condition_len,
        target_len: task.d,
    };
    if model.shape != expected {
        return Err(CliError::Usage(format!(
            "checkpoint shape {:?} does not match task {} on this path ({expected:?})",
            model.shape, task.name
        )));
    }
    Ok(Box::new(model))
}

fn sampler_config(task: &ToyTask, steps: usize, record_trace: bool) -> CliResult<SamplerConfig> {
    let eos = match task.mode {
        TaskMode::Text => task.space.special().eos,
        TaskMode::Grid => None,
    };
    let sc = SamplerConfig {
        steps,
        record_trace,
        eos,
    };
    sc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(sc)
}

/// Splits `total` consecutive indices into one contiguous block per
/// condition: `(condition index, first index, count)`.
fn blocks(total: usize, conditions: usize) -> Vec<(usize, usize, usize)> {
    (0..conditions)
        .map(|j| {
            let start = j * total / conditions;
            let end = (j + 1) * total / conditions;
            (j, start, end - start)
        })
        .filter(|&(_, _, n)| n > 0)
        .collect()
}

/// Log target probability, `-inf` for sequences outside the task vocabulary.
fn log_q(task: &ToyTask, condition: &[usize], tokens: &[usize]) -> CliResult<f64> {
    if tokens.iter().any(|&t| t >= task.k()) {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(task.log_q(condition, tokens)?)
}

struct ChainResult {
    chain: usize,
    condition: Vec<usize>,
    output: SampleOutput<f64>,
}

fn run_chains(
    denoiser: &dyn Denoiser<f64>,
    path: &ConditionalPath<f64>,
    task: &ToyTask,
    sc: &SamplerConfig,
    total: usize,
    seed: u64,
) -> CliResult<Vec<ChainResult>> {
    let conds: Vec<Vec<usize>> = task.conditions().map(<[usize]>::to_vec).collect();
    let mut results = Vec::with_capacity(total);
    for (j, start, n) in blocks(total, conds.len()) {
        let out = sample_chains(denoiser, path, sc, task.d, &conds[j], n, seed, start, &[])?;
        for (i, output) in out.outputs.into_iter().enumerate() {
            results.push(ChainResult {
                chain: start + i,
                condition: conds[j].clone(),
                output,
            });
        }
    }
    Ok(results)
}

/// Target over the path vocabulary (the mixture path adds a mask token).
fn path_joint(
    task: &ToyTask,
    path: &ConditionalPath<f64>,
    condition: &[usize],
) -> CliResult<JointDistribution<f64>> {
    let q = task.joint(condition)?;
    Ok(if q.k() == path.k() {
        q
    } else {
        q.lift_vocab(path.k())?
    })
}

/// Chain-weighted mean TV over conditions and the matching Monte-Carlo
/// scale `1/2 sum_x sqrt(q(1-q)/n)`.
fn tv_and_sigma(
    task: &ToyTask,
    path: &ConditionalPath<f64>,
    results: &[ChainResult],
) -> CliResult<(f64, f64)> {
    let mut tv = 0.0;
    let mut sigma = 0.0;
    let mut start = 0;
    while start < results.len() {
        let cond = &results[start].condition;
        let end = start
            + results[start..]
                .iter()
                .take_while(|r| &r.condition == cond)
                .count();
        let samples: Vec<Vec<usize>> = results[start..end]
            .iter()
            .map(|r| r.output.tokens.clone())
            .collect();
        let q = path_joint(task, path, cond)?;
        let n = samples.len() as f64;
        tv += empirical_tv(&samples, &q)? * n;
        sigma += 0.5
            * q.probs()
                .iter()
                .map(|&p| (p * (1.0 - p) / n).sqrt())
                .sum::<f64>()
            * n;
        start = end;
    }
    let total = results.len() as f64;
    Ok((tv / total, sigma / total))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

pub fn verify(cfg: &RunConfig) -> CliResult {
    prepare_out(cfg)?;
    let suite = SuiteConfig {
        seed: cfg.seed,
        rate_rows: cfg.verify_rate_rows,
        continuity_trials: cfg.verify_continuity_trials,
        equivalence_trials: cfg.verify_equivalence_trials,
        boundary_trials: cfg.verify_boundary_trials,
        marginal_times: cfg.verify_marginal_times,
        schedule: cfg.beta_schedule().map_err(CliError::Usage)?,
        corrupt_rates: cfg.corrupt == Corruption::Rate,
        ..SuiteConfig::default()
    };
    let groups = run_suite(&suite)?;
    let mut failed = Vec::new();
    for (stem, reports) in &groups {
        write_file(&cfg.out, &format!("{stem}.csv"), &reports_csv(reports))?;
        for r in reports {
            println!("{r}");
            if !r.pass {
                failed.push(format!("{} at {}", r.check, r.location));
            }
        }
    }
    if failed.is_empty() {
        println!("verify: all {} report groups passed", groups.len());
        Ok(())
    } else {
        Err(CliError::Check(failed.join("; ")))
    }
}

pub fn train(cfg: &RunConfig) -> CliResult {
    let task = load_task(cfg)?;
    let path = build_path(cfg, &task)?;
    prepare_out(cfg)?;
    let dataset = task.dataset(cfg.dataset_size, &mut substream(cfg.seed, "data"));
    let shape = ModelShape {
        k: path.k(),
        cond_len: task.condition_len,
        target_len: task.d,
    };
    let hyper = Hyperparameters {
        embed_dim: cfg.embed_dim,
        hidden: cfg.hidden,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        steps: cfg.train_steps,
        time_embedding: cfg.time_embedding,
    };
    let model =
        FactorizedModel::new(shape, hyper, cfg.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut trainer = Trainer::new(model, &path, &dataset, cfg.seed)?;
    let report_every = (cfg.train_steps / 10).max(1);
    let mut diverged = None;
    for step in 0..cfg.train_steps {
        match trainer.step() {
            Ok(loss) if step % report_every == 0 => info!("train step {step}: loss {loss:.6}"),
            Ok(_) => {}
            Err(e @ Error::Divergence { .. }) => {
                diverged = Some(e);
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    write_file(&cfg.out, "model.ckpt", &trainer.model.to_checkpoint_text())?;
    write_file(
        &cfg.out,
        "loss.csv",
        &dfm_core::denoiser::loss_curve_csv(&trainer.curve),
    )?;
    if let Some(e) = diverged {
        println!(
            "train: diverged after {} finite steps; kept the last finite checkpoint",
            trainer.curve.len()
        );
        return Err(e.into());
    }
    let curve = &trainer.curve;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        let tail = &curve[curve.len().saturating_sub(100)..];
        let tail_mean = mean(tail.iter().copied());
        println!(
            "train: {} steps on {} (K = {}, D = {}); loss {first:.6} -> {last:.6}, mean of last {} = {tail_mean:.6}",
            curve.len(),
            task.name,
            path.k(),
            task.d,
            tail.len()
        );
    } else {
        println!("train: 0 steps; wrote the initial checkpoint");
    }
    Ok(())
}

pub fn sample(cfg: &RunConfig) -> CliResult {
    let task = load_task(cfg)?;
    let path = build_path(cfg, &task)?;
    let denoiser = load_denoiser(cfg, &task, &path)?;
    prepare_out(cfg)?;
    let sc = sampler_config(&task, cfg.steps, cfg.trace_dir.is_some())?;
    let results = run_chains(denoiser.as_ref(), &path, &task, &sc, cfg.chains, cfg.seed)?;

    if let Some(dir) = &cfg.trace_dir {
        fs::create_dir_all(dir)?;
        for r in &results {
            if let Some(trace) = &r.output.trace {
                write_file(dir, &format!("chain_{}.csv", r.chain), &trace.to_csv())?;
            }
        }
    }

    let mut csv = String::from("chain,condition,tokens,log_q\n");
    let mut rendered = String::new();
    let mut scores = Vec::with_capacity(results.len());
    let mut eos_missing = 0usize;
    for r in &results {
        let lq = log_q(&task, &r.condition, &r.output.tokens)?;
        scores.push(lq);
        let _ = writeln!(
            csv,
            "{},{},{},{lq}",
            r.chain,
            join_tokens(&r.condition),
            join_tokens(&r.output.tokens)
        );
        match (task.mode, &task.tokenizer) {
            (TaskMode::Text, Some(tok)) => {
                let decoded = tok.decode(&r.output.tokens);
                eos_missing += usize::from(!decoded.eos_found);
                let _ = writeln!(rendered, "{}", decoded.text);
            }
            _ => {
                let _ = writeln!(
                    rendered,
                    "# chain {}\n{}\n",
                    r.chain,
                    task.render(&r.output.tokens)
                );
            }
        }
    }
    write_file(&cfg.out, "samples.csv", &csv)?;
    write_file(&cfg.out, "samples.txt", &rendered)?;

    let mut metrics = vec![
        ("chains", results.len().to_string()),
        ("steps", cfg.steps.to_string()),
        ("mean_log_q", mean(scores.iter().copied()).to_string()),
        (
            "on_support",
            (scores.iter().filter(|s| s.is_finite()).count() as f64 / scores.len() as f64)
                .to_string(),
        ),
    ];
    if task.mode == TaskMode::Text {
        metrics.push(("eos_missing", eos_missing.to_string()));
    }
    if task.is_enumerable() {
        let (tv, sigma) = tv_and_sigma(&task, &path, &results)?;
        metrics.push(("tv", tv.to_string()));
        metrics.push(("tv_sigma", sigma.to_string()));
    }
    let mut out = String::from("metric,value\n");
    for (name, value) in &metrics {
        let _ = writeln!(out, "{name},{value}");
        println!("sample {name}: {value}");
    }
    write_file(&cfg.out, "metrics.csv", &out)
}

pub fn bench(cfg: &RunConfig) -> CliResult {
    let task = load_task(cfg)?;
    let path = build_path(cfg, &task)?;
    let denoiser = load_denoiser(cfg, &task, &path)?;
    prepare_out(cfg)?;
    let enumerable = task.is_enumerable();
    let quality = if enumerable { "tv" } else { "mean_log_q" };
    let mut csv = format!("steps,{quality},seconds,chains_per_second\n");
    let mut rows = Vec::new();
    for steps in BENCH_STEPS {
        let sc = sampler_config(&task, steps, false)?;
        let start = Instant::now();
        let results = run_chains(
            denoiser.as_ref(),
            &path,
            &task,
            &sc,
            cfg.bench_chains,
            cfg.seed,
        )?;
        let seconds = start.elapsed().as_secs_f64().max(1e-9);
        let (q, slack) = if enumerable {
            tv_and_sigma(&task, &path, &results)?
        } else {
            let scores: Vec<f64> = results
                .iter()
                .map(|r| log_q(&task, &r.condition, &r.output.tokens))
                .collect::<CliResult<_>>()?;
            let m = mean(scores.iter().copied());
            let var = mean(scores.iter().map(|s| (s - m).powi(2)));
            (m, (var / scores.len() as f64).sqrt())
        };
        let cps = results.len() as f64 / seconds;
        let _ = writeln!(csv, "{steps},{q},{seconds},{cps}");
        println!("bench steps {steps}: {quality} {q:.6}, {seconds:.3} s, {cps:.1} chains/s");
        rows.push((q, slack));
    }
    write_file(&cfg.out, "bench.csv", &csv)?;
    let (first, s_first) = rows[0];
    let (last, s_last) = rows[rows.len() - 1];
    let (lo, hi) = (BENCH_STEPS[0], BENCH_STEPS[BENCH_STEPS.len() - 1]);
    let ok = if enumerable {
        last <= first + 2.0 * s_first.max(s_last)
    } else {
        last >= first - 2.0 * (s_first.powi(2) + s_last.powi(2)).sqrt()
    };
    if ok {
        println!("bench: quality at {hi} steps is no worse than at {lo} steps within 2 sigma");
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "{quality} at {hi} steps ({last}) is worse than at {lo} steps ({first}) beyond 2 sigma"
        )))
    }
}

pub fn bestof(cfg: &RunConfig) -> CliResult {
    let task = load_task(cfg)?;
    let targets: Vec<(Vec<usize>, Option<Vec<usize>>)> = task
        .conditions()
        .map(|c| (c.to_vec(), task.target(c).ok().and_then(|q| q.point_mass())))
        .collect();
    match cfg.scorer {
        Scorer::LogQ if !task.is_enumerable() => {
            return Err(CliError::Usage(format!(
                "scorer logq needs an enumerable task; {} is not",
                task.name
            )));
        }
        Scorer::Match if targets.iter().any(|(_, t)| t.is_none()) => {
            return Err(CliError::Usage(format!(
                "scorer match needs a deterministic target per condition (e.g. copy_condition); {} has none",
                task.name
            )));
        }
        _ => {}
    }
    let path = build_path(cfg, &task)?;
    let denoiser = load_denoiser(cfg, &task, &path)?;
    prepare_out(cfg)?;
    let sc = sampler_config(&task, cfg.steps, false)?;

    let mut csv = String::from("rep,condition,rank,chain,score,tokens\n");
    let mut selected_means = Vec::with_capacity(cfg.bestof_reps);
    let mut singles = Vec::with_capacity(cfg.bestof_reps * cfg.best_of);
    let mut excluded = 0;
    for (j, start, count) in blocks(cfg.bestof_reps, targets.len()) {
        let (cond, point) = &targets[j];
        let scorer = |tokens: &[usize]| -> dfm_core::Result<f64> {
            match cfg.scorer {
                Scorer::LogQ => {
                    log_q(&task, cond, tokens).map_err(|e| Error::Scorer(e.to_string()))
                }
                Scorer::Match => {
                    let target = point.as_ref().expect("checked above");
                    let hits = tokens.iter().zip(target).filter(|(a, b)| a == b).count();
                    Ok(hits as f64 / target.len() as f64)
                }
            }
        };
        for rep in start..start + count {
            let res = best_of_n(
                denoiser.as_ref(),
                &path,
                &sc,
                task.d,
                cond,
                scorer,
                cfg.best_of,
                cfg.keep,
                cfg.seed,
                rep * cfg.best_of,
            )?;
            excluded += res.excluded;
            singles.extend(res.all.iter().map(|c| c.score));
            selected_means.push(mean(res.selected.iter().map(|c| c.score)));
            for (rank, c) in res.selected.iter().enumerate() {
                let _ = writeln!(
                    csv,
                    "{rep},{},{rank},{},{},{}",
                    join_tokens(cond),
                    c.chain,
                    c.score,
                    join_tokens(&c.tokens)
                );
            }
        }
    }
    write_file(&cfg.out, "bestof.csv", &csv)?;
    let mean_selected = mean(selected_means.iter().copied());
    let mean_single = mean(singles.iter().copied());
    let metrics = [
        ("reps", cfg.bestof_reps.to_string()),
        ("n", cfg.best_of.to_string()),
        ("keep", cfg.keep.to_string()),
        ("scorer", cfg.scorer.name().to_string()),
        ("mean_selected", mean_selected.to_string()),
        ("mean_single", mean_single.to_string()),
        ("excluded", excluded.to_string()),
    ];
    let mut out = String::from("metric,value\n");
    for (name, value) in &metrics {
        let _ = writeln!(out, "{name},{value}");
        println!("bestof {name}: {value}");
    }
    write_file(&cfg.out, "metrics.csv", &out)
}
