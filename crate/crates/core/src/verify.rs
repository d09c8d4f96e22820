//! Residual checks against independent oracles.
//!
//! Each check returns a [`ResidualReport`] holding the largest residual
//! seen, where it was seen, and whether it is within tolerance. Checks
//! draw their random configurations from named substreams
//! (`verify.<check>.<trial>`), so a report depends only on the seed.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng as _;
use rayon::prelude::*;

use crate::denoiser::{Denoiser, OracleDenoiser};
use crate::error::{Error, Result};
use crate::paths::{
    decode_index_into, marginal_path, marginal_path_dprob, ConditionalPath, JointDistribution,
};
use crate::rng::{substream, Rng};
use crate::sampler::{revision_stats, sample_chains, SampleTrace, SamplerConfig};
use crate::schedule::{BetaSchedule, KappaSchedule};
use crate::token_space::{DistanceTable, SpecialTokens, TokenSpace};
use crate::velocity::{
    ko_velocity_closed, ko_velocity_generic, velocity_row, RateKernel, VelocityRow,
};

pub const RATE_TOLERANCE: f64 = 1e-12;
pub const CONTINUITY_ANALYTIC_TOLERANCE: f64 = 1e-8;
pub const CONTINUITY_FD_TOLERANCE: f64 = 1e-4;
pub const MARGINAL_TOLERANCE: f64 = 1e-6;
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-9;
pub const SOURCE_TV_TOLERANCE: f64 = 1e-12;
pub const CAP_TV_TOLERANCE: f64 = 1e-6;
/// Largest `K^D` accepted by the marginal continuity check.
pub const MARGINAL_ENUMERATION_LIMIT: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub check: String,
    pub max_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub trials: usize,
    /// Where the largest residual occurred.
    pub location: String,
    pub detail: String,
}

impl ResidualReport {
    pub const CSV_HEADER: &'static str = "check,max_residual,tolerance,pass";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{}",
            self.check, self.max_residual, self.tolerance, self.pass
        )
    }
}

impl fmt::Display for ResidualReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: max residual {:.3e} (tolerance {:.1e}) over {} trials at {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.check,
            self.max_residual,
            self.tolerance,
            self.trials,
            self.location
        )?;
        if !self.detail.is_empty() {
            write!(f, "; {}", self.detail)?;
        }
        Ok(())
    }
}

/// CSV text for a group of reports, header included.
pub fn reports_csv(reports: &[ResidualReport]) -> String {
    let mut out = String::from(ResidualReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Running maximum that keeps the first location attaining it.
#[derive(Debug, Clone)]
struct MaxTracker {
    value: f64,
    location: String,
}

impl MaxTracker {
    fn new() -> Self {
        Self {
            value: 0.0,
            location: "-".into(),
        }
    }

    fn offer(&mut self, value: f64, location: impl FnOnce() -> String) {
        // NaN residuals must fail the check, so they win over any number.
        if value > self.value || (value.is_nan() && !self.value.is_nan()) {
            self.value = value;
            self.location = location();
        }
    }

    fn merge(mut self, other: Self) -> Self {
        self.offer(other.value, || other.location);
        self
    }
}

fn report(
    check: &str,
    tracker: MaxTracker,
    tolerance: f64,
    trials: usize,
    extra_pass: bool,
    detail: String,
) -> ResidualReport {
    ResidualReport {
        check: check.into(),
        pass: tracker.value <= tolerance && extra_pass,
        max_residual: tracker.value,
        tolerance,
        trials,
        location: tracker.location,
        detail,
    }
}

fn trial_rng(seed: u64, check: &str, trial: usize) -> Rng {
    substream(seed, &format!("verify.{check}.{trial}"))
}

/// Random unit embeddings: `K` points drawn uniformly from `[-1, 1]^dim`
/// and normalized.
pub fn random_space(k: usize, dim: usize, rng: &mut Rng) -> Result<TokenSpace<f64>> {
    let raw: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    TokenSpace::new(&raw, SpecialTokens::default())
}

/// Random metric path with `K` in `2..=k_max`, embedding dimension in
/// `2..=8` and `c` in `[0.5, 5]`.
pub fn random_metric_path(k_max: usize, a: f64, rng: &mut Rng) -> Result<ConditionalPath<f64>> {
    let k = rng.gen_range(2..=k_max.max(2));
    let dim = rng.gen_range(2..=8);
    let space = random_space(k, dim, rng)?;
    let sched = BetaSchedule::new(rng.gen_range(0.5..5.0), a, 1e6)?;
    Ok(ConditionalPath::metric(&space, sched))
}

/// Rate condition: every off-diagonal entry is non-negative and the
/// diagonal cancels the off-diagonal sum. The sum is accumulated over
/// off-diagonal entries in index order and then added to the diagonal.
pub fn check_rate_condition(rows: &[VelocityRow<f64>]) -> ResidualReport {
    let mut sums = MaxTracker::new();
    let mut min_off = f64::INFINITY;
    let mut min_at = String::from("-");
    for (r, row) in rows.iter().enumerate() {
        let off: f64 = row
            .rates
            .iter()
            .enumerate()
            .filter(|(x, _)| *x != row.z)
            .map(|(_, v)| v)
            .sum();
        sums.offer((off + row.rates[row.z]).abs(), || {
            format!("row {r} (z = {})", row.z)
        });
        for (x, &v) in row.rates.iter().enumerate() {
            if x != row.z && !(v >= min_off) {
                min_off = v;
                min_at = format!("row {r} entry {x}");
            }
        }
    }
    let off_ok = rows.is_empty() || min_off >= 0.0;
    let detail = if rows.is_empty() {
        String::new()
    } else {
        format!("min off-diagonal {min_off:e} at {min_at}")
    };
    let mut rep = report(
        "rate_condition",
        sums,
        RATE_TOLERANCE,
        rows.len(),
        off_ok,
        detail,
    );
    if !off_ok {
        rep.location = min_at;
    }
    rep
}

/// Velocity rows from random metric, mask and posterior-mixed
/// configurations.
pub fn random_velocity_rows(
    count: usize,
    k_max: usize,
    seed: u64,
) -> Result<Vec<VelocityRow<f64>>> {
    (0..count)
        .into_par_iter()
        .map(|j| {
            let mut rng = trial_rng(seed, "rate", j);
            let t = rng.gen_range(0.05..0.95);
            match j % 3 {
                0 | 1 => {
                    let a = if j % 3 == 0 { 0.9 } else { 2.0 };
                    let path = random_metric_path(k_max, a, &mut rng)?;
                    let (z, x1) = (rng.gen_range(0..path.k()), rng.gen_range(0..path.k()));
                    if rng.gen_bool(0.5) {
                        velocity_row(&path, t, z, x1)
                    } else {
                        let post: Vec<f64> = (0..path.k()).map(|_| rng.gen::<f64>()).collect();
                        let total: f64 = post.iter().sum();
                        let post: Vec<f64> = post.into_iter().map(|p| p / total).collect();
                        crate::velocity::marginal_velocity_row(&post, &path, t, z)
                    }
                }
                _ => {
                    let k = rng.gen_range(2..=k_max.max(2));
                    let path = ConditionalPath::mixture_masked(k, k - 1, KappaSchedule::Linear)?;
                    let x1 = rng.gen_range(0..k - 1);
                    let z = if rng.gen_bool(0.5) { k - 1 } else { x1 };
                    velocity_row(&path, t, z, x1)
                }
            }
        })
        .collect()
}

/// How `d/dt p_t` is obtained in the conditional continuity check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Derivative {
    Analytic,
    /// Central difference with step `h`.
    FiniteDifference(f64),
}

impl Derivative {
    pub fn tolerance(&self) -> f64 {
        match self {
            Self::Analytic => CONTINUITY_ANALYTIC_TOLERANCE,
            Self::FiniteDifference(_) => CONTINUITY_FD_TOLERANCE,
        }
    }
}

fn dprob(
    path: &ConditionalPath<f64>,
    t: f64,
    x1: usize,
    derivative: Derivative,
) -> Result<Vec<f64>> {
    match derivative {
        Derivative::Analytic => path.path_dprob(t, x1),
        Derivative::FiniteDifference(h) => {
            let hi = path.path_prob(t + h, x1)?;
            let lo = path.path_prob(t - h, x1)?;
            Ok(hi
                .iter()
                .zip(&lo)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect())
        }
    }
}

/// Largest `|r(x)|` of the univariate Kolmogorov forward residual
/// `r(x) = dp(x) - sum_{z != x} [u(x, z) p(z) - u(z, x) p(x)]` for one
/// `(t, x1)`, with rates scaled by `rate_scale`. Returns the value and
/// the state where it occurs.
pub fn conditional_continuity_residual(
    path: &ConditionalPath<f64>,
    t: f64,
    x1: usize,
    derivative: Derivative,
    rate_scale: f64,
) -> Result<(f64, usize)> {
    if !(t > 0.0 && t < 1.0) || path.is_degenerate(t)? {
        return Err(Error::Domain(format!(
            "continuity is checked strictly inside (0, 1) below the cap, got t = {t}"
        )));
    }
    let k = path.k();
    let p = path.path_prob(t, x1)?;
    let dp = dprob(path, t, x1, derivative)?;
    let kernel = RateKernel::new(path, t)?;
    // rows[z][x] = u(x, z | x1)
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|z| {
            kernel
                .row(z, x1)
                .rates
                .into_iter()
                .map(|v| v * rate_scale)
                .collect()
        })
        .collect();
    let mut best = (0.0, 0);
    for x in 0..k {
        let mut div = 0.0;
        for z in 0..k {
            if z != x {
                div += rows[z][x] * p[z] - rows[x][z] * p[x];
            }
        }
        let r = (dp[x] - div).abs();
        if r > best.0 || r.is_nan() {
            best = (r, x);
        }
    }
    Ok(best)
}

/// Conditional continuity over random metric paths (`trials` of them),
/// one random `(t, x1)` per trial.
pub fn check_continuity_conditional(
    trials: usize,
    k_max: usize,
    seed: u64,
    derivative: Derivative,
    rate_scale: f64,
) -> Result<ResidualReport> {
    let name = match derivative {
        Derivative::Analytic => "continuity_conditional_analytic",
        Derivative::FiniteDifference(_) => "continuity_conditional_fd",
    };
    let tracker = (0..trials)
        .into_par_iter()
        .map(|j| {
            let mut rng = trial_rng(seed, "continuity", j);
            let a = if j % 2 == 0 { 0.9 } else { 2.0 };
            let path = random_metric_path(k_max, a, &mut rng)?;
            let t = rng.gen_range(0.05..0.95);
            let x1 = rng.gen_range(0..path.k());
            let (r, x) = conditional_continuity_residual(&path, t, x1, derivative, rate_scale)?;
            let mut m = MaxTracker::new();
            m.offer(r, || {
                format!(
                    "trial {j}: K = {}, t = {t:.6}, x1 = {x1}, x = {x}",
                    path.k()
                )
            });
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(MaxTracker::new(), MaxTracker::merge);
    Ok(report(
        name,
        tracker,
        derivative.tolerance(),
        trials,
        true,
        String::new(),
    ))
}

/// Conditional continuity of an explicit path on a time grid and target
/// list.
pub fn check_path_continuity(
    path: &ConditionalPath<f64>,
    times: &[f64],
    targets: &[usize],
    derivative: Derivative,
) -> Result<ResidualReport> {
    let mut tracker = MaxTracker::new();
    for &t in times {
        for &x1 in targets {
            let (r, x) = conditional_continuity_residual(path, t, x1, derivative, 1.0)?;
            tracker.offer(r, || format!("t = {t:.6}, x1 = {x1}, x = {x}"));
        }
    }
    Ok(report(
        &format!("continuity_{}", path.kind().name()),
        tracker,
        derivative.tolerance(),
        times.len() * targets.len(),
        true,
        String::new(),
    ))
}

/// Marginal continuity on the full joint: the marginal `p_t` of `q`, its
/// exact derivative, and posterior-mixed rates between states differing in
/// exactly one coordinate.
pub fn check_continuity_marginal(
    q: &JointDistribution<f64>,
    path: &ConditionalPath<f64>,
    times: &[f64],
) -> Result<ResidualReport> {
    if q.len() > MARGINAL_ENUMERATION_LIMIT {
        return Err(Error::Capacity {
            size: q.len() as u128,
            limit: MARGINAL_ENUMERATION_LIMIT as u128,
        });
    }
    let oracle = OracleDenoiser::new(path.clone(), q.clone())?;
    let mut tracker = MaxTracker::new();
    for &t in times {
        let (r, state) = marginal_residual(&oracle, q, path, t)?;
        tracker.offer(r, || format!("t = {t:.6}, state = {state:?}"));
    }
    Ok(report(
        "continuity_marginal",
        tracker,
        MARGINAL_TOLERANCE,
        times.len(),
        true,
        String::new(),
    ))
}

/// Largest marginal residual at one time and the state attaining it.
pub fn marginal_residual(
    oracle: &OracleDenoiser<f64>,
    q: &JointDistribution<f64>,
    path: &ConditionalPath<f64>,
    t: f64,
) -> Result<(f64, Vec<usize>)> {
    let (k, d, n) = (q.k(), q.d(), q.len());
    let pt = marginal_path(q, path, t)?;
    let dpt = marginal_path_dprob(q, path, t)?;
    let kernel = RateKernel::new(path, t)?;
    // rows[s][i][x]: posterior-mixed rate from state s to x at coordinate i.
    let rows: Vec<Vec<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut seq = vec![0; d];
            decode_index_into(k, s, &mut seq);
            if pt.probs()[s] == 0.0 {
                return Ok(vec![vec![0.0; k]; d]);
            }
            let post = oracle.posterior(t, &[], &seq)?;
            let mut buf = vec![0.0; k];
            Ok((0..d)
                .map(|i| {
                    let mut acc = vec![0.0; k];
                    for (x1, &w) in post.row(i).iter().enumerate() {
                        if w != 0.0 {
                            kernel.row_into(seq[i], x1, &mut buf);
                            acc.iter_mut().zip(&buf).for_each(|(a, b)| *a += w * b);
                        }
                    }
                    acc
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let stride: Vec<usize> = (0..d).map(|i| k.pow((d - 1 - i) as u32)).collect();
    let mut best = (0.0, 0);
    let mut seq = vec![0; d];
    for x in 0..n {
        decode_index_into(k, x, &mut seq);
        let px = pt.probs()[x];
        let mut div = 0.0;
        for i in 0..d {
            let base = x - seq[i] * stride[i];
            for v in 0..k {
                if v == seq[i] {
                    continue;
                }
                let y = base + v * stride[i];
                div += rows[y][i][seq[i]] * pt.probs()[y] - rows[x][i][v] * px;
            }
        }
        let r = (dpt[x] - div).abs();
        if r > best.0 || r.is_nan() {
            best = (r, x);
        }
    }
    Ok((best.0, q.sequence_of(best.1)))
}

/// Closed-form versus flux-form velocity over random metric configurations
/// (full rows, every `x != z`). Residual is `|closed - generic| / (1 + |closed|)`.
/// With `asymmetric`, the distance table is a random non-symmetric matrix.
///
/// The flux form divides by `p_t(z | x1)`. Draws where that probability
/// underflows below the normal range carry no information about the
/// identity and are counted as skipped.
pub fn closed_vs_generic(
    trials: usize,
    k_max: usize,
    seed: u64,
    asymmetric: bool,
) -> Result<ResidualReport> {
    if trials == 0 {
        return Err(Error::Validation(
            "closed_vs_generic needs at least one trial".into(),
        ));
    }
    let tracker = (0..trials)
        .into_par_iter()
        .map(|j| {
            let mut rng = trial_rng(
                seed,
                if asymmetric {
                    "equivalence_asym"
                } else {
                    "equivalence"
                },
                j,
            );
            let a = if j % 2 == 0 { 0.9 } else { 2.0 };
            let path = if asymmetric {
                let k = rng.gen_range(2..=k_max.max(2));
                let m: Vec<f64> = (0..k * k)
                    .map(|i| {
                        if i / k == i % k {
                            0.0
                        } else {
                            rng.gen_range(0.0..2.0)
                        }
                    })
                    .collect();
                let table = DistanceTable::from_matrix_asymmetric(k, m)?;
                ConditionalPath::metric_from_table(
                    Arc::new(table),
                    BetaSchedule::new(rng.gen_range(0.5..5.0), a, 1e6)?,
                )
            } else {
                random_metric_path(k_max, a, &mut rng)?
            };
            let k = path.k();
            let sched = *path.beta_schedule().expect("metric");
            let table = path.distances().expect("metric");
            let t = rng.gen_range(0.05..0.95);
            let x1 = rng.gen_range(0..k);
            let z = rng.gen_range(0..k);
            let p = path.path_prob(t, x1)?;
            let dp = path.path_dprob(t, x1)?;
            let mut m = MaxTracker::new();
            if p[z] < f64::MIN_POSITIVE {
                return Ok((m, 1usize));
            }
            for x in (0..k).filter(|&x| x != z) {
                let closed = ko_velocity_closed(table, &sched, t, x, z, x1)?;
                let generic = ko_velocity_generic(&p, &dp, x, z)?;
                m.offer((closed - generic).abs() / (1.0 + closed.abs()), || {
                    format!("trial {j}: K = {k}, a = {a}, t = {t:.6}, x1 = {x1}, z = {z}, x = {x}")
                });
            }
            Ok((m, 0))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold((MaxTracker::new(), 0), |(acc, skipped), (m, s)| {
            (acc.merge(m), skipped + s)
        });
    let (tracker, skipped) = tracker;
    let name = if asymmetric {
        "closed_vs_generic_asymmetric"
    } else {
        "closed_vs_generic"
    };
    let detail = if skipped > 0 {
        format!("{skipped} trials skipped: p_t(z | x1) below the normal range")
    } else {
        String::new()
    };
    Ok(report(
        name,
        tracker,
        EQUIVALENCE_TOLERANCE,
        trials - skipped,
        true,
        detail,
    ))
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Boundary behaviour over random spaces: `p_0(. | x1)` is uniform and the
/// conditional at `beta = beta_cap` is the point mass on `x1`.
pub fn check_boundaries(trials: usize, k_max: usize, seed: u64) -> Result<Vec<ResidualReport>> {
    let pairs = (0..trials)
        .into_par_iter()
        .map(|j| {
            let mut rng = trial_rng(seed, "boundary", j);
            let path = random_metric_path(k_max, 0.9, &mut rng)?;
            let k = path.k();
            let x1 = rng.gen_range(0..k);
            let p0 = path.path_prob(0.0, x1)?;
            let uniform = vec![1.0 / k as f64; k];
            let cap = path.beta_schedule().expect("metric").beta_cap;
            let pc = path.metric_prob_at_beta(cap, x1)?;
            let mut delta = vec![0.0; k];
            delta[x1] = 1.0;
            let loc = format!("trial {j}: K = {k}, x1 = {x1}");
            let (mut a, mut b) = (MaxTracker::new(), MaxTracker::new());
            a.offer(tv(&p0, &uniform), || loc.clone());
            b.offer(tv(&pc, &delta), || loc);
            Ok((a, b))
        })
        .collect::<Result<Vec<_>>>()?;
    let (src, cap) = pairs
        .into_iter()
        .fold((MaxTracker::new(), MaxTracker::new()), |(a, b), (x, y)| {
            (a.merge(x), b.merge(y))
        });
    Ok(vec![
        report(
            "boundary_source_uniform",
            src,
            SOURCE_TV_TOLERANCE,
            trials,
            true,
            String::new(),
        ),
        report(
            "boundary_cap_point_mass",
            cap,
            CAP_TV_TOLERANCE,
            trials,
            true,
            String::new(),
        ),
    ])
}

/// `TV = 1/2 sum_s |count(s)/n - q(s)|`.
pub fn empirical_tv(samples: &[Vec<usize>], q: &JointDistribution<f64>) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation(
            "empirical TV of an empty sample set".into(),
        ));
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for s in samples {
        *counts.entry(q.index_of(s)?).or_default() += 1;
    }
    let n = samples.len() as f64;
    let mut total = 0.0;
    for (idx, &p) in q.probs().iter().enumerate() {
        let c = counts.get(&idx).copied().unwrap_or(0) as f64;
        total += (c / n - p).abs();
    }
    Ok(0.5 * total)
}

/// Whether every jump in `trace` strictly reduces the distance to `target`
/// at the position that jumped.
pub fn is_monotone_toward(
    trace: &SampleTrace<f64>,
    table: &DistanceTable<f64>,
    target: &[usize],
) -> bool {
    trace.steps.windows(2).all(|w| {
        w[0].tokens
            .iter()
            .zip(&w[1].tokens)
            .zip(target)
            .all(|((&a, &b), &x1)| a == b || table.get(b, x1) < table.get(a, x1))
    })
}

/// Matched mask-path and metric-path runs on one target.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfCorrectionReport {
    pub chains: usize,
    pub mask_total_revisions: usize,
    pub mask_chains_with_revision: usize,
    pub metric_total_revisions: usize,
    pub metric_chains_with_revision: usize,
    pub mask_tv: f64,
    pub metric_tv: f64,
}

impl SelfCorrectionReport {
    pub fn metric_revision_fraction(&self) -> f64 {
        self.metric_chains_with_revision as f64 / self.chains as f64
    }
}

impl fmt::Display for SelfCorrectionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} chains: mask revisions {} ({} chains), metric revisions {} ({:.1}% of chains), TV mask {:.4}, TV metric {:.4}",
            self.chains,
            self.mask_total_revisions,
            self.mask_chains_with_revision,
            self.metric_total_revisions,
            100.0 * self.metric_revision_fraction(),
            self.mask_tv,
            self.metric_tv
        )
    }
}

/// Runs oracle-denoiser chains under the metric path on `space` and under
/// the mask path (space plus one mask token) with the same sampler
/// settings, then compares post-commit revisions and final TV.
pub fn self_correction_experiment(
    space: &TokenSpace<f64>,
    q: &JointDistribution<f64>,
    schedule: BetaSchedule<f64>,
    steps: usize,
    chains: usize,
    seed: u64,
) -> Result<SelfCorrectionReport> {
    let k = space.k();
    let metric = ConditionalPath::metric(space, schedule);
    let mask = ConditionalPath::mixture_masked(k + 1, k, KappaSchedule::Linear)?;
    let lifted = q.lift_vocab(k + 1)?;
    let config = SamplerConfig {
        steps,
        record_trace: true,
        eos: None,
    };
    let run = |path: &ConditionalPath<f64>,
               target: &JointDistribution<f64>|
     -> Result<(usize, usize, f64)> {
        let oracle = OracleDenoiser::new(path.clone(), target.clone())?;
        let out = sample_chains(&oracle, path, &config, q.d(), &[], chains, seed, 0, &[])?;
        let mut total = 0;
        let mut with = 0;
        let mut finals = Vec::with_capacity(chains);
        for o in out.outputs {
            let stats = revision_stats(o.trace.as_ref().expect("traces recorded"));
            total += stats.total_revisions;
            with += usize::from(stats.total_revisions > 0);
            finals.push(o.tokens);
        }
        Ok((total, with, empirical_tv(&finals, target)?))
    };
    let (mask_total, mask_with, mask_tv) = run(&mask, &lifted)?;
    let (metric_total, metric_with, metric_tv) = run(&metric, q)?;
    Ok(SelfCorrectionReport {
        chains,
        mask_total_revisions: mask_total,
        mask_chains_with_revision: mask_with,
        metric_total_revisions: metric_total,
        metric_chains_with_revision: metric_with,
        mask_tv,
        metric_tv,
    })
}

/// Settings for [`run_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    pub k_max: usize,
    pub rate_rows: usize,
    pub continuity_trials: usize,
    pub fd_step: f64,
    pub marginal_k: usize,
    pub marginal_d: usize,
    pub marginal_times: usize,
    pub equivalence_trials: usize,
    pub boundary_trials: usize,
    pub schedule: BetaSchedule<f64>,
    /// Flip the sign of one off-diagonal rate in every sampled row.
    pub corrupt_rates: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            k_max: 32,
            rate_rows: 10_000,
            continuity_trials: 100,
            fd_step: 1e-5,
            marginal_k: 3,
            marginal_d: 2,
            marginal_times: 20,
            equivalence_trials: 1000,
            boundary_trials: 100,
            schedule: BetaSchedule::default(),
            corrupt_rates: false,
        }
    }
}

/// Report groups produced by [`run_suite`], keyed by file stem.
pub type SuiteReports = Vec<(&'static str, Vec<ResidualReport>)>;

pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReports> {
    let mut rows = random_velocity_rows(cfg.rate_rows, cfg.k_max, cfg.seed)?;
    if cfg.corrupt_rates {
        for row in &mut rows {
            if let Some(x) = (0..row.rates.len()).find(|&x| x != row.z && row.rates[x] != 0.0) {
                row.rates[x] = -row.rates[x];
            }
        }
    }
    let rate = check_rate_condition(&rows);

    let continuity = vec![
        check_continuity_conditional(
            cfg.continuity_trials,
            cfg.k_max,
            cfg.seed,
            Derivative::Analytic,
            1.0,
        )?,
        check_continuity_conditional(
            cfg.continuity_trials,
            cfg.k_max,
            cfg.seed,
            Derivative::FiniteDifference(cfg.fd_step),
            1.0,
        )?,
    ];

    let mut rng = substream(cfg.seed, "verify.marginal");
    let space = random_space(cfg.marginal_k, 3, &mut rng)?;
    let path = ConditionalPath::metric(&space, cfg.schedule);
    let size = crate::paths::joint_size(cfg.marginal_k, cfg.marginal_d)?;
    let q = JointDistribution::from_weights(
        cfg.marginal_k,
        cfg.marginal_d,
        (0..size).map(|_| rng.gen_range(0.05..1.0)).collect(),
    )?;
    let times: Vec<f64> = (1..=cfg.marginal_times)
        .map(|i| i as f64 / (cfg.marginal_times + 1) as f64)
        .collect();
    let marginal = check_continuity_marginal(&q, &path, &times)?;

    let equivalence = vec![
        closed_vs_generic(cfg.equivalence_trials, cfg.k_max, cfg.seed, false)?,
        closed_vs_generic(cfg.equivalence_trials.min(100), cfg.k_max, cfg.seed, true)?,
    ];
    let boundary = check_boundaries(cfg.boundary_trials, cfg.k_max, cfg.seed)?;
    Ok(vec![
        ("rate_condition", vec![rate]),
        ("continuity_conditional", continuity),
        ("continuity_marginal", vec![marginal]),
        ("closed_vs_generic", equivalence),
        ("boundary", boundary),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_condition_passes_and_catches_negation() {
        let rows = random_velocity_rows(300, 12, 1).unwrap();
        let rep = check_rate_condition(&rows);
        assert!(rep.pass, "{rep}");
        let mut bad = rows.clone();
        let row = &mut bad[7];
        let x = (0..row.rates.len()).find(|&x| x != row.z && row.rates[x] > 0.0);
        let x = x.unwrap_or_else(|| {
            let y = (row.z + 1) % row.rates.len();
            row.rates[y] = 1.0;
            y
        });
        row.rates[x] = -row.rates[x];
        let rep = check_rate_condition(&bad);
        assert!(!rep.pass);
        assert_eq!(rep.location, format!("row 7 entry {x}"));
    }

    #[test]
    fn all_zero_row_passes() {
        let rep = check_rate_condition(&[VelocityRow {
            z: 1,
            rates: vec![0.0; 4],
        }]);
        assert!(rep.pass);
        assert_eq!(rep.max_residual, 0.0);
    }

    #[test]
    fn conditional_continuity_and_negative_control() {
        let ok = check_continuity_conditional(30, 16, 2, Derivative::Analytic, 1.0).unwrap();
        assert!(ok.pass, "{ok}");
        let fd = check_continuity_conditional(30, 16, 2, Derivative::FiniteDifference(1e-5), 1.0)
            .unwrap();
        assert!(fd.pass, "{fd}");
        let bad = check_continuity_conditional(30, 16, 2, Derivative::Analytic, 1.01).unwrap();
        assert!(!bad.pass);
    }

    #[test]
    fn mask_path_continuity() {
        let path = ConditionalPath::mixture_masked(5, 4, KappaSchedule::Linear).unwrap();
        let times: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
        let rep =
            check_path_continuity(&path, &times, &[0, 1, 2, 3], Derivative::Analytic).unwrap();
        assert!(rep.pass, "{rep}");
    }

    #[test]
    fn marginal_matches_conditional_for_single_position() {
        let mut rng = substream(3, "m");
        let space = random_space(4, 2, &mut rng).unwrap();
        let path = ConditionalPath::metric(&space, BetaSchedule::default());
        let q = JointDistribution::point_mass(4, &[2]).unwrap();
        let oracle = OracleDenoiser::new(path.clone(), q.clone()).unwrap();
        for t in [0.2, 0.6] {
            let (m, _) = marginal_residual(&oracle, &q, &path, t).unwrap();
            let (c, _) =
                conditional_continuity_residual(&path, t, 2, Derivative::Analytic, 1.0).unwrap();
            assert!(m < 1e-10 && c < 1e-10);
        }
    }

    #[test]
    fn marginal_continuity_on_product_and_random_q() {
        let mut rng = substream(4, "m");
        let space = random_space(3, 2, &mut rng).unwrap();
        let path = ConditionalPath::metric(&space, BetaSchedule::default());
        let times: Vec<f64> = (1..=5).map(|i| i as f64 / 6.0).collect();
        let product =
            JointDistribution::product(&[vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3]]).unwrap();
        assert!(
            check_continuity_marginal(&product, &path, &times)
                .unwrap()
                .pass
        );
        let q = JointDistribution::from_weights(
            3,
            2,
            (0..9).map(|_| rng.gen_range(0.1..1.0)).collect(),
        )
        .unwrap();
        let rep = check_continuity_marginal(&q, &path, &times).unwrap();
        assert!(rep.pass, "{rep}");
        let big = JointDistribution::<f64>::uniform(11, 4).unwrap();
        assert!(matches!(
            check_continuity_marginal(&big, &path, &times),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn equivalence_symmetric_and_asymmetric() {
        let r = closed_vs_generic(200, 16, 5, false).unwrap();
        assert!(r.pass, "{r}");
        assert!(closed_vs_generic(200, 16, 5, true).unwrap().pass);
        assert!(closed_vs_generic(0, 16, 5, false).is_err());
    }

    #[test]
    fn boundaries_hold() {
        for r in check_boundaries(50, 16, 6).unwrap() {
            assert!(r.pass, "{r}");
        }
    }

    #[test]
    fn empirical_tv_closed_forms() {
        let q = JointDistribution::<f64>::uniform(3, 2).unwrap();
        let samples = vec![vec![1, 2]; 10];
        assert!((empirical_tv(&samples, &q).unwrap() - (1.0 - 1.0 / 9.0)).abs() < 1e-15);
        assert!(empirical_tv(&[], &q).is_err());
    }

    #[test]
    fn point_mass_trajectories_are_monotone() {
        let space = TokenSpace::<f64>::circle(8, SpecialTokens::default()).unwrap();
        let path = ConditionalPath::metric(&space, BetaSchedule::default());
        let target = vec![3, 7];
        let q = JointDistribution::point_mass(8, &target).unwrap();
        let oracle = OracleDenoiser::new(path.clone(), q).unwrap();
        let cfg = SamplerConfig {
            steps: 32,
            record_trace: true,
            eos: None,
        };
        let out = sample_chains(&oracle, &path, &cfg, 2, &[], 50, 1, 0, &[]).unwrap();
        for o in &out.outputs {
            assert!(is_monotone_toward(
                o.trace.as_ref().unwrap(),
                space.distances(),
                &target
            ));
        }
    }

    #[test]
    fn single_step_has_no_revisions() {
        let space = TokenSpace::<f64>::circle(8, SpecialTokens::default()).unwrap();
        let q = JointDistribution::from_weights(
            8,
            3,
            (0..512)
                .map(|i| if i == 0 || i == 292 { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let rep =
            self_correction_experiment(&space, &q, BetaSchedule::default(), 1, 200, 7).unwrap();
        assert_eq!(rep.mask_total_revisions, 0);
        assert_eq!(rep.metric_total_revisions, 0);
    }

    #[test]
    fn suite_reports_are_reproducible_and_corruptible() {
        let cfg = SuiteConfig {
            rate_rows: 200,
            continuity_trials: 10,
            equivalence_trials: 50,
            boundary_trials: 10,
            marginal_times: 4,
            ..SuiteConfig::default()
        };
        let a = run_suite(&cfg).unwrap();
        assert_eq!(a, run_suite(&cfg).unwrap());
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|(_, rs)| rs.iter().all(|r| r.pass)));
        let bad = run_suite(&SuiteConfig {
            corrupt_rates: true,
            ..cfg
        })
        .unwrap();
        assert!(!bad[0].1[0].pass);
        let csv = reports_csv(&a[1].1);
        assert!(
            csv.starts_with("check,max_residual,tolerance,pass\ncontinuity_conditional_analytic,")
        );
    }
}
