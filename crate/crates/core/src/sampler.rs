//! CTMC Euler sampling.
//!
//! Each step from `t` to `t + h` updates every position independently:
//! draw a clean-token guess `x1 ~ p_{1|t}`, compute the exit rate `lambda`
//! of the current token under the conditional velocity toward `x1`, jump
//! with probability `1 - exp(-h lambda)`, and if jumping pick the new token
//! proportionally to the off-diagonal rates.
//!
//! The grid is `t_k = k / N` for `k = 0..N`; the last update starts at
//! `1 - 1/N`. The output is the per-position argmax of the denoiser on the
//! final state, evaluated at the midpoint of the last step.

use std::collections::HashMap;

use log::warn;
use rayon::prelude::*;

use crate::denoiser::{Denoiser, Posterior};
use crate::error::{Error, Result};
use crate::paths::{ConditionalPath, PathKind, SequenceState};
use crate::rng::{chain_stream, open_closed_unit, sample_weighted, Rng};
use crate::scalar::Scalar;
use crate::velocity::RateKernel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub record_trace: bool,
    /// End-of-sequence token; when set, responses are cut at its first
    /// occurrence.
    pub eos: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            record_trace: false,
            eos: None,
        }
    }
}

impl SamplerConfig {
    pub fn new(steps: usize) -> Result<Self> {
        let cfg = Self {
            steps,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Validation("sampler needs at least one step".into()));
        }
        Ok(())
    }

    pub fn h<T: Scalar>(&self) -> T {
        T::one() / T::from_usize_lossy(self.steps)
    }

    pub fn grid_time<T: Scalar>(&self, k: usize) -> T {
        T::from_usize_lossy(k) / T::from_usize_lossy(self.steps)
    }

    /// Last grid time at which a step starts, `1 - 1/N`.
    pub fn t_end<T: Scalar>(&self) -> T {
        self.grid_time(self.steps - 1)
    }

    /// Time at which the final state is denoised: the midpoint of the last
    /// step, `1 - 1/(2N)`. The final state has already taken the last jump,
    /// so evaluating at `1 - 1/N` would pair it with the pre-jump time; for
    /// the mask path at `N = 1` that time is `0`, where any unmasked token
    /// has zero probability.
    pub fn t_final<T: Scalar>(&self) -> T {
        T::one() - self.h::<T>() / T::lit(2.0)
    }
}

/// One snapshot: the state reached at `t` (time `k/N`), the denoiser argmax
/// evaluated on it, and which positions jumped on the way in.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep<T> {
    pub t: T,
    pub tokens: Vec<usize>,
    pub argmax: Vec<usize>,
    pub jumps: Vec<bool>,
}

/// Full trajectory record: `N + 1` snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace<T> {
    pub condition: Vec<usize>,
    pub steps: Vec<TraceStep<T>>,
}

impl<T: Scalar> SampleTrace<T> {
    /// CSV rows `step,t,token_0,...,token_{D-1},jumps`; `jumps` is one digit
    /// per position.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let d = self.steps.first().map_or(0, |s| s.tokens.len());
        let mut out = String::from("step,t");
        for i in 0..d {
            let _ = write!(out, ",token_{i}");
        }
        out.push_str(",jumps\n");
        for (k, s) in self.steps.iter().enumerate() {
            let _ = write!(out, "{k},{}", s.t);
            for tok in &s.tokens {
                let _ = write!(out, ",{tok}");
            }
            let mask: String = s.jumps.iter().map(|&j| if j { '1' } else { '0' }).collect();
            let _ = writeln!(out, ",{mask}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput<T> {
    /// Full per-position argmax output.
    pub tokens: Vec<usize>,
    /// Output cut before the first eos (equal to `tokens` without eos).
    pub response: Vec<usize>,
    pub trace: Option<SampleTrace<T>>,
}

/// Tokens strictly before the first `eos`.
pub fn truncate_at_eos(tokens: &[usize], eos: Option<usize>) -> Vec<usize> {
    match eos.and_then(|e| tokens.iter().position(|&t| t == e)) {
        Some(cut) => tokens[..cut].to_vec(),
        None => tokens.to_vec(),
    }
}

/// `t = 0` draw: uniform tokens for the metric path, all-mask for the
/// mask path. Condition tokens are copied.
pub fn init_state<T: Scalar>(
    path: &ConditionalPath<T>,
    d: usize,
    condition: &[usize],
    rng: &mut Rng,
) -> SequenceState<T> {
    let tokens = (0..d).map(|_| path.sample_source(rng)).collect();
    SequenceState::new(tokens, condition.to_vec(), T::zero())
}

/// Time at which the step starting at `t` evaluates velocities. Equal to
/// `t` except where the schedule derivative is singular (`t = 0` with
/// `a < 1`), where the step uses the interval midpoint.
pub fn rate_time<T: Scalar>(path: &ConditionalPath<T>, t: T, h: T) -> T {
    if path.kind() == PathKind::Metric && t == T::zero() {
        if let Some(s) = path.beta_schedule() {
            if s.beta_dot(t).is_err() {
                return h / T::lit(2.0);
            }
        }
    }
    t
}

/// Per-position Euler update of one chain in place. Returns the jump mask.
fn update_chain<T: Scalar>(
    tokens: &mut [usize],
    posterior: &Posterior<T>,
    kernel: &RateKernel<'_, T>,
    h: f64,
    rng: &mut Rng,
    row: &mut Vec<T>,
    weights: &mut Vec<f64>,
) -> Result<Vec<bool>> {
    let k = kernel.k();
    row.resize(k, T::zero());
    weights.resize(k, 0.0);
    let mut jumps = vec![false; tokens.len()];
    for (i, tok) in tokens.iter_mut().enumerate() {
        for (w, &p) in weights.iter_mut().zip(posterior.row(i)) {
            *w = p.as_f64();
        }
        let x1 = sample_weighted(weights, rng)
            .ok_or_else(|| Error::NonFinite(format!("denoiser row {i} is not a distribution")))?;
        let z = *tok;
        kernel.row_into(z, x1, row);
        let lambda = -row[z].as_f64();
        if !lambda.is_finite() {
            return Err(Error::NonFinite(format!(
                "exit rate {lambda} at position {i}"
            )));
        }
        let jump_prob = -(-h * lambda).exp_m1();
        if open_closed_unit(rng) <= jump_prob {
            for (x, (w, &r)) in weights.iter_mut().zip(row.iter()).enumerate() {
                *w = if x == z { 0.0 } else { r.as_f64() };
            }
            let dest = sample_weighted(weights, rng).ok_or_else(|| {
                Error::NonFinite(format!("jump selected with zero rates at position {i}"))
            })?;
            *tok = dest;
            jumps[i] = true;
        }
    }
    Ok(jumps)
}

/// One Euler step of a single chain from `t` to `t + h`.
pub fn euler_step<T: Scalar, D: Denoiser<T> + ?Sized>(
    state: &SequenceState<T>,
    t: T,
    h: T,
    denoiser: &D,
    path: &ConditionalPath<T>,
    rng: &mut Rng,
) -> Result<(SequenceState<T>, Vec<bool>)> {
    let posterior = denoiser.posterior(t, &state.condition, &state.tokens)?;
    let kernel = RateKernel::new(path, rate_time(path, t, h))?;
    let mut tokens = state.tokens.clone();
    let jumps = update_chain(
        &mut tokens,
        &posterior,
        &kernel,
        h.as_f64(),
        rng,
        &mut Vec::new(),
        &mut Vec::new(),
    )?;
    Ok((
        SequenceState::new(tokens, state.condition.clone(), t + h),
        jumps,
    ))
}

/// Samples one chain.
pub fn sample<T: Scalar, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    path: &ConditionalPath<T>,
    config: &SamplerConfig,
    d: usize,
    condition: &[usize],
    rng: &mut Rng,
) -> Result<SampleOutput<T>> {
    let mut batch = ChainBatch::new(denoiser, path, *config, d, condition)?;
    batch.rngs = vec![rng.clone()];
    let out = batch.run(&[])?;
    *rng = batch.rngs.pop().expect("one chain");
    Ok(out.outputs.into_iter().next().expect("one chain"))
}

/// Result of [`sample_chains`].
#[derive(Debug, Clone)]
pub struct ChainsOutput<T> {
    pub outputs: Vec<SampleOutput<T>>,
    /// States after the requested step counts, `(step, states)`.
    pub snapshots: Vec<(usize, Vec<Vec<usize>>)>,
}

/// Runs `chains` independent chains, chain `i` on the substream
/// `chain.{first_chain + i}` of `seed`. Chains are advanced step by step
/// together; identical states within a step share one denoiser call.
#[allow(clippy::too_many_arguments)]
pub fn sample_chains<T: Scalar, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    path: &ConditionalPath<T>,
    config: &SamplerConfig,
    d: usize,
    condition: &[usize],
    chains: usize,
    seed: u64,
    first_chain: usize,
    snapshot_steps: &[usize],
) -> Result<ChainsOutput<T>> {
    let mut batch = ChainBatch::new(denoiser, path, *config, d, condition)?;
    batch.rngs = (0..chains)
        .map(|i| chain_stream(seed, first_chain + i))
        .collect();
    batch.run(snapshot_steps)
}

struct ChainBatch<'a, T: Scalar, D: ?Sized> {
    denoiser: &'a D,
    path: &'a ConditionalPath<T>,
    config: SamplerConfig,
    d: usize,
    condition: &'a [usize],
    rngs: Vec<Rng>,
}

impl<'a, T: Scalar, D: Denoiser<T> + ?Sized> ChainBatch<'a, T, D> {
    fn new(
        denoiser: &'a D,
        path: &'a ConditionalPath<T>,
        config: SamplerConfig,
        d: usize,
        condition: &'a [usize],
    ) -> Result<Self> {
        config.validate()?;
        if denoiser.k() != path.k() {
            return Err(Error::Shape(format!(
                "denoiser K = {} but path K = {}",
                denoiser.k(),
                path.k()
            )));
        }
        if d == 0 {
            return Err(Error::Validation("sequence length must be positive".into()));
        }
        for &c in condition {
            crate::error::check_index(c, path.k())?;
        }
        Ok(Self {
            denoiser,
            path,
            config,
            d,
            condition,
            rngs: Vec::new(),
        })
    }

    /// Posterior for every chain state, one denoiser call per distinct state.
    fn posteriors(&self, t: T, states: &[Vec<usize>]) -> Result<(Vec<Posterior<T>>, Vec<usize>)> {
        let mut index: HashMap<&[usize], usize> = HashMap::new();
        let mut unique: Vec<&[usize]> = Vec::new();
        let slots: Vec<usize> = states
            .iter()
            .map(|s| {
                *index.entry(s.as_slice()).or_insert_with(|| {
                    unique.push(s.as_slice());
                    unique.len() - 1
                })
            })
            .collect();
        let posts = unique
            .par_iter()
            .map(|s| self.denoiser.posterior(t, self.condition, s))
            .collect::<Result<Vec<_>>>()?;
        Ok((posts, slots))
    }

    fn run(&mut self, snapshot_steps: &[usize]) -> Result<ChainsOutput<T>> {
        let n = self.config.steps;
        let h: T = self.config.h();
        let record = self.config.record_trace;
        let mut states: Vec<Vec<usize>> = self
            .rngs
            .iter_mut()
            .map(|rng| init_state(self.path, self.d, self.condition, rng).tokens)
            .collect();
        let mut traces: Vec<Vec<TraceStep<T>>> =
            vec![Vec::new(); if record { states.len() } else { 0 }];
        let mut snapshots = Vec::new();
        let mut pending_jumps: Vec<Vec<bool>> = vec![vec![false; self.d]; states.len()];

        for step in 0..n {
            if snapshot_steps.contains(&step) {
                snapshots.push((step, states.clone()));
            }
            let t: T = self.config.grid_time(step);
            let (posts, slots) = self.posteriors(t, &states)?;
            if record {
                for (c, trace) in traces.iter_mut().enumerate() {
                    trace.push(TraceStep {
                        t,
                        tokens: states[c].clone(),
                        argmax: posts[slots[c]].argmax(),
                        jumps: std::mem::take(&mut pending_jumps[c]),
                    });
                }
            }
            let kernel = RateKernel::new(self.path, rate_time(self.path, t, h))?;
            let hf = h.as_f64();
            let jumps: Vec<Vec<bool>> = states
                .par_iter_mut()
                .zip(self.rngs.par_iter_mut())
                .zip(slots.par_iter())
                .map_init(
                    || (Vec::new(), Vec::new()),
                    |(row, weights), ((tokens, rng), &slot)| {
                        update_chain(tokens, &posts[slot], &kernel, hf, rng, row, weights)
                    },
                )
                .collect::<Result<_>>()?;
            if record {
                pending_jumps = jumps;
            }
        }
        if snapshot_steps.contains(&n) {
            snapshots.push((n, states.clone()));
        }

        let (posts, slots) = self.posteriors(self.config.t_final(), &states)?;
        let mut outputs = Vec::with_capacity(states.len());
        for (c, s) in states.into_iter().enumerate() {
            let tokens = posts[slots[c]].argmax();
            let trace = if record {
                let mut steps = std::mem::take(&mut traces[c]);
                steps.push(TraceStep {
                    t: T::one(),
                    tokens: s,
                    argmax: tokens.clone(),
                    jumps: std::mem::take(&mut pending_jumps[c]),
                });
                Some(SampleTrace {
                    condition: self.condition.to_vec(),
                    steps,
                })
            } else {
                None
            };
            let response = truncate_at_eos(&tokens, self.config.eos);
            outputs.push(SampleOutput {
                tokens,
                response,
                trace,
            });
        }
        Ok(ChainsOutput { outputs, snapshots })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub chain: usize,
    pub tokens: Vec<usize>,
    pub score: f64,
}

/// Result of a best-of-N draw: the selected candidates plus every scored
/// candidate (for single-sample baselines).
#[derive(Debug, Clone, PartialEq)]
pub struct BestOfN {
    pub selected: Vec<ScoredCandidate>,
    pub all: Vec<ScoredCandidate>,
    pub excluded: usize,
}

/// Draws `n` chains, scores each final sequence, and keeps the `keep`
/// highest scores (ties broken by chain index). Candidates whose score is
/// an error, NaN, or `+inf` are excluded with a warning; `-inf` is a valid
/// score (e.g. `ln 0`).
#[allow(clippy::too_many_arguments)]
pub fn best_of_n<T: Scalar, D: Denoiser<T> + ?Sized, S>(
    denoiser: &D,
    path: &ConditionalPath<T>,
    config: &SamplerConfig,
    d: usize,
    condition: &[usize],
    scorer: S,
    n: usize,
    keep: usize,
    seed: u64,
    first_chain: usize,
) -> Result<BestOfN>
where
    S: Fn(&[usize]) -> Result<f64>,
{
    if keep == 0 || keep > n {
        return Err(Error::Validation(format!(
            "best-of-n needs n >= keep >= 1, got n = {n}, keep = {keep}"
        )));
    }
    let cfg = SamplerConfig {
        record_trace: false,
        ..*config
    };
    let out = sample_chains(
        denoiser,
        path,
        &cfg,
        d,
        condition,
        n,
        seed,
        first_chain,
        &[],
    )?;
    let mut all = Vec::with_capacity(n);
    let mut excluded = 0;
    for (i, o) in out.outputs.into_iter().enumerate() {
        let chain = first_chain + i;
        match scorer(&o.tokens) {
            Ok(s) if !s.is_nan() && s != f64::INFINITY => all.push(ScoredCandidate {
                chain,
                tokens: o.tokens,
                score: s,
            }),
            Ok(s) => {
                warn!("chain {chain}: scorer returned {s}; candidate excluded");
                excluded += 1;
            }
            Err(e) => {
                warn!("chain {chain}: scorer failed ({e}); candidate excluded");
                excluded += 1;
            }
        }
    }
    if all.is_empty() {
        return Err(Error::Scorer("every candidate was excluded".into()));
    }
    let mut sorted = all.clone();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("NaN excluded")
            .then(a.chain.cmp(&b.chain))
    });
    sorted.truncate(keep);
    Ok(BestOfN {
        selected: sorted,
        all,
        excluded,
    })
}

/// Revision analysis of one trajectory. A position is committed when it
/// first leaves its initial token; every later change is a revision.
#[derive(Debug, Clone, PartialEq)]
pub struct RevisionStats {
    pub revisions_per_position: Vec<usize>,
    pub total_revisions: usize,
    /// Step index (snapshot) at which each position was committed.
    pub commit_step: Vec<Option<usize>>,
    /// Fraction of positions that jumped into each snapshot `1..=N`.
    pub jump_fraction_per_step: Vec<f64>,
}

pub fn revision_stats<T: Scalar>(trace: &SampleTrace<T>) -> RevisionStats {
    let d = trace.steps.first().map_or(0, |s| s.tokens.len());
    let mut revisions = vec![0; d];
    let mut commit = vec![None; d];
    let mut fractions = Vec::with_capacity(trace.steps.len().saturating_sub(1));
    for (k, pair) in trace.steps.windows(2).enumerate() {
        let (prev, next) = (&pair[0], &pair[1]);
        let mut changed = 0;
        for i in 0..d {
            if prev.tokens[i] != next.tokens[i] {
                changed += 1;
                if commit[i].is_none() {
                    commit[i] = Some(k + 1);
                } else {
                    revisions[i] += 1;
                }
            }
        }
        fractions.push(if d == 0 {
            0.0
        } else {
            changed as f64 / d as f64
        });
    }
    RevisionStats {
        total_revisions: revisions.iter().sum(),
        revisions_per_position: revisions,
        commit_step: commit,
        jump_fraction_per_step: fractions,
    }
}
