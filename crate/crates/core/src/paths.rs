//! Conditional probability paths `p_t(. | x1)` and exact marginals on
//! enumerable joint spaces.
//!
//! Two families are provided:
//!
//! * the metric path, `softmax(-beta_t * d(., x1))`, which starts uniform and
//!   concentrates on `x1` as `beta_t` grows;
//! * the mixture path, `(1 - kappa_t) * source + kappa_t * delta_{x1}`, which
//!   with a point-mass source on a mask token is the masked-diffusion
//!   construction.
//!
//! Paths factorize over positions, so a sequence is corrupted by sampling
//! every position independently.

use std::sync::Arc;

use crate::error::{check_index, Error, Result};
use crate::rng::{sample_weighted, Rng};
use crate::scalar::{is_probability_vector, softmax_into, Scalar};
use crate::schedule::{BetaSchedule, KappaSchedule};
use crate::token_space::{DistanceTable, TokenSpace};

/// Largest joint space `K^D` that may be enumerated.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

const PROB_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    Metric,
    Mixture,
}

impl PathKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "metric" => Ok(Self::Metric),
            "mixture" => Ok(Self::Mixture),
            other => Err(Error::Domain(format!("unknown path kind `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Metric => "metric",
            Self::Mixture => "mixture",
        }
    }
}

#[derive(Debug, Clone)]
enum PathForm<T> {
    Metric {
        distances: Arc<DistanceTable<T>>,
        schedule: BetaSchedule<T>,
    },
    Mixture {
        schedule: KappaSchedule,
        source: Vec<T>,
        mask: Option<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct ConditionalPath<T> {
    form: PathForm<T>,
}

impl<T: Scalar> ConditionalPath<T> {
    pub fn metric(space: &TokenSpace<T>, schedule: BetaSchedule<T>) -> Self {
        Self::metric_from_table(space.shared_distances(), schedule)
    }

    pub fn metric_from_table(distances: Arc<DistanceTable<T>>, schedule: BetaSchedule<T>) -> Self {
        Self {
            form: PathForm::Metric {
                distances,
                schedule,
            },
        }
    }

    /// Mixture path whose source is a point mass on `mask`.
    pub fn mixture_masked(k: usize, mask: usize, schedule: KappaSchedule) -> Result<Self> {
        check_index(mask, k)?;
        let mut source = vec![T::zero(); k];
        source[mask] = T::one();
        Ok(Self {
            form: PathForm::Mixture {
                schedule,
                source,
                mask: Some(mask),
            },
        })
    }

    /// Mixture path with an arbitrary source distribution.
    pub fn mixture(source: Vec<T>, schedule: KappaSchedule) -> Result<Self> {
        if source.len() < 2 || !is_probability_vector(&source, 1e-12) {
            return Err(Error::Validation(
                "mixture source must be a probability vector over K >= 2".into(),
            ));
        }
        let mask = {
            let ones: Vec<usize> = (0..source.len())
                .filter(|&i| source[i] == T::one())
                .collect();
            (ones.len() == 1).then(|| ones[0])
        };
        Ok(Self {
            form: PathForm::Mixture {
                schedule,
                source,
                mask,
            },
        })
    }

    pub fn kind(&self) -> PathKind {
        match self.form {
            PathForm::Metric { .. } => PathKind::Metric,
            PathForm::Mixture { .. } => PathKind::Mixture,
        }
    }

    pub fn k(&self) -> usize {
        match &self.form {
            PathForm::Metric { distances, .. } => distances.k(),
            PathForm::Mixture { source, .. } => source.len(),
        }
    }

    pub fn beta_schedule(&self) -> Option<&BetaSchedule<T>> {
        match &self.form {
            PathForm::Metric { schedule, .. } => Some(schedule),
            PathForm::Mixture { .. } => None,
        }
    }

    pub fn kappa_schedule(&self) -> Option<KappaSchedule> {
        match &self.form {
            PathForm::Mixture { schedule, .. } => Some(*schedule),
            PathForm::Metric { .. } => None,
        }
    }

    pub fn distances(&self) -> Option<&DistanceTable<T>> {
        match &self.form {
            PathForm::Metric { distances, .. } => Some(distances),
            PathForm::Mixture { .. } => None,
        }
    }

    /// Mask token of a point-mass mixture source.
    pub fn mask_token(&self) -> Option<usize> {
        match &self.form {
            PathForm::Mixture { mask, .. } => *mask,
            PathForm::Metric { .. } => None,
        }
    }

    /// `p_0`: uniform for the metric path, the source for the mixture path.
    pub fn source(&self) -> Vec<T> {
        match &self.form {
            PathForm::Metric { distances, .. } => {
                vec![T::one() / T::from_usize_lossy(distances.k()); distances.k()]
            }
            PathForm::Mixture { source, .. } => source.clone(),
        }
    }

    fn check_time(t: T) -> Result<()> {
        if !(t >= T::zero() && t < T::one()) {
            return Err(Error::Domain(format!(
                "path is evaluated on [0, 1), got t = {t}"
            )));
        }
        Ok(())
    }

    /// Whether `t` is in the metric path's capped region, where the
    /// conditional is an exact point mass.
    pub fn is_degenerate(&self, t: T) -> Result<bool> {
        Self::check_time(t)?;
        match &self.form {
            PathForm::Metric { schedule, .. } => schedule.is_capped(t),
            PathForm::Mixture { .. } => Ok(false),
        }
    }

    pub fn path_prob(&self, t: T, x1: usize) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.k()];
        self.path_prob_into(t, x1, &mut out)?;
        Ok(out)
    }

    pub fn path_prob_into(&self, t: T, x1: usize, out: &mut [T]) -> Result<()> {
        Self::check_time(t)?;
        check_index(x1, self.k())?;
        match &self.form {
            PathForm::Metric {
                distances,
                schedule,
            } => {
                if schedule.is_capped(t)? {
                    out.iter_mut().for_each(|v| *v = T::zero());
                    out[x1] = T::one();
                    return Ok(());
                }
                let beta = schedule.beta(t)?;
                metric_softmax_into(distances, beta, x1, out);
            }
            PathForm::Mixture {
                schedule, source, ..
            } => {
                let kappa = schedule.kappa(t)?;
                for (o, &s) in out.iter_mut().zip(source) {
                    *o = (T::one() - kappa) * s;
                }
                out[x1] += kappa;
            }
        }
        Ok(())
    }

    /// Metric conditional at an explicit `beta`, bypassing the schedule.
    pub fn metric_prob_at_beta(&self, beta: T, x1: usize) -> Result<Vec<T>> {
        let distances = self
            .distances()
            .ok_or_else(|| Error::Domain("metric_prob_at_beta needs a metric path".into()))?;
        check_index(x1, self.k())?;
        if !(beta >= T::zero()) {
            return Err(Error::Domain(format!(
                "beta must be non-negative, got {beta}"
            )));
        }
        let mut out = vec![T::zero(); self.k()];
        metric_softmax_into(distances, beta, x1, &mut out);
        Ok(out)
    }

    /// `ln p_t(x | x1)` for every `x`; zero-probability states give `-inf`.
    pub fn path_log_prob(&self, t: T, x1: usize) -> Result<Vec<T>> {
        Self::check_time(t)?;
        check_index(x1, self.k())?;
        match &self.form {
            PathForm::Metric {
                distances,
                schedule,
            } if !schedule.is_capped(t)? => {
                let beta = schedule.beta(t)?;
                let logits: Vec<T> = (0..self.k())
                    .map(|x| -beta * distances.get(x, x1))
                    .collect();
                let lse = crate::scalar::log_sum_exp(&logits);
                Ok(logits.into_iter().map(|l| l - lse).collect())
            }
            _ => Ok(self.path_prob(t, x1)?.into_iter().map(|p| p.ln()).collect()),
        }
    }

    /// Analytic `d/dt p_t(. | x1)`. Errors in the metric path's capped
    /// region, where the derivative is not represented.
    pub fn path_dprob(&self, t: T, x1: usize) -> Result<Vec<T>> {
        let p = self.path_prob(t, x1)?;
        match &self.form {
            PathForm::Metric {
                distances,
                schedule,
            } => {
                if schedule.is_capped(t)? {
                    return Err(Error::Domain(format!(
                        "path derivative undefined in the capped region (t = {t})"
                    )));
                }
                let beta_dot = schedule.beta_dot(t)?;
                let mean_d: T = (0..p.len()).map(|x| p[x] * distances.get(x, x1)).sum();
                Ok((0..p.len())
                    .map(|x| beta_dot * p[x] * (mean_d - distances.get(x, x1)))
                    .collect())
            }
            PathForm::Mixture {
                schedule, source, ..
            } => {
                let kd = schedule.kappa_dot(t)?;
                let mut dp: Vec<T> = source.iter().map(|&s| -kd * s).collect();
                dp[x1] += kd;
                Ok(dp)
            }
        }
    }

    /// Draws a token from `p_0`.
    pub fn sample_source(&self, rng: &mut Rng) -> usize {
        use rand::Rng as _;
        match &self.form {
            PathForm::Metric { distances, .. } => rng.gen_range(0..distances.k()),
            PathForm::Mixture { source, mask, .. } => match mask {
                Some(m) => *m,
                None => {
                    let w: Vec<f64> = source.iter().map(|v| v.as_f64()).collect();
                    sample_weighted(&w, rng).expect("validated source")
                }
            },
        }
    }

    /// Samples `x_t ~ prod_i p_t(. | x1^i)` position by position.
    pub fn sample_corrupted(&self, t: T, x1_seq: &[usize], rng: &mut Rng) -> Result<Vec<usize>> {
        let k = self.k();
        let mut cache: Vec<Option<Vec<f64>>> = vec![None; k];
        let mut out = Vec::with_capacity(x1_seq.len());
        for &x1 in x1_seq {
            check_index(x1, k)?;
            if cache[x1].is_none() {
                let p = self.path_prob(t, x1)?;
                cache[x1] = Some(p.into_iter().map(|v| v.as_f64()).collect());
            }
            let w = cache[x1].as_ref().expect("filled above");
            out.push(
                sample_weighted(w, rng)
                    .ok_or_else(|| Error::NonFinite("corruption weights".into()))?,
            );
        }
        Ok(out)
    }

    /// `M[x1][x] = p_t(x | x1)` for all pairs.
    pub fn transition_matrix(&self, t: T) -> Result<Vec<Vec<T>>> {
        (0..self.k()).map(|x1| self.path_prob(t, x1)).collect()
    }
}

fn metric_softmax_into<T: Scalar>(distances: &DistanceTable<T>, beta: T, x1: usize, out: &mut [T]) {
    let logits: Vec<T> = (0..distances.k())
        .map(|x| -beta * distances.get(x, x1))
        .collect();
    softmax_into(&logits, out);
}

/// A target sequence at time `t` together with its (never corrupted)
/// condition tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceState<T> {
    pub tokens: Vec<usize>,
    pub condition: Vec<usize>,
    pub t: T,
}

impl<T: Scalar> SequenceState<T> {
    pub fn new(tokens: Vec<usize>, condition: Vec<usize>, t: T) -> Self {
        Self {
            tokens,
            condition,
            t,
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        for &tok in self.tokens.iter().chain(&self.condition) {
            check_index(tok, k)?;
        }
        Ok(())
    }
}

/// Probability table over `[K]^D`. Sequence `(s_0, ..., s_{D-1})` is stored at
/// index `sum_i s_i K^(D-1-i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution<T> {
    k: usize,
    d: usize,
    probs: Vec<T>,
}

pub fn joint_size(k: usize, d: usize) -> Result<usize> {
    let size = (k as u128).checked_pow(d as u32).unwrap_or(u128::MAX);
    if size > ENUMERATION_LIMIT {
        return Err(Error::Capacity {
            size,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(size as usize)
}

impl<T: Scalar> JointDistribution<T> {
    pub fn new(k: usize, d: usize, probs: Vec<T>) -> Result<Self> {
        let size = joint_size(k, d)?;
        if k < 1 || d < 1 {
            return Err(Error::Validation(
                "joint distribution needs K >= 1 and D >= 1".into(),
            ));
        }
        if probs.len() != size {
            return Err(Error::Shape(format!(
                "expected {size} probabilities, got {}",
                probs.len()
            )));
        }
        if !is_probability_vector(&probs, PROB_TOLERANCE) {
            return Err(Error::Validation(
                "joint table is not a probability distribution".into(),
            ));
        }
        Ok(Self { k, d, probs })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(k: usize, d: usize, weights: Vec<T>) -> Result<Self> {
        let total: T = weights.iter().copied().sum();
        if !(total > T::zero()) || weights.iter().any(|&w| w < T::zero() || !w.is_finite()) {
            return Err(Error::Validation(
                "weights must be finite, non-negative and not all zero".into(),
            ));
        }
        Self::new(k, d, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(k: usize, d: usize) -> Result<Self> {
        let size = joint_size(k, d)?;
        Self::new(k, d, vec![T::one() / T::from_usize_lossy(size); size])
    }

    pub fn point_mass(k: usize, seq: &[usize]) -> Result<Self> {
        let size = joint_size(k, seq.len())?;
        let mut probs = vec![T::zero(); size];
        let idx = encode_index(k, seq)?;
        probs[idx] = T::one();
        Self::new(k, seq.len(), probs)
    }

    /// Product of per-position marginals.
    pub fn product(marginals: &[Vec<T>]) -> Result<Self> {
        let d = marginals.len();
        if d == 0 {
            return Err(Error::Validation("product of zero marginals".into()));
        }
        let k = marginals[0].len();
        let size = joint_size(k, d)?;
        let mut probs = vec![T::zero(); size];
        let mut seq = vec![0; d];
        for (idx, p) in probs.iter_mut().enumerate() {
            decode_index_into(k, idx, &mut seq);
            *p = seq
                .iter()
                .enumerate()
                .map(|(i, &s)| marginals[i][s])
                .fold(T::one(), |a, b| a * b);
        }
        Self::new(k, d, probs)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn index_of(&self, seq: &[usize]) -> Result<usize> {
        if seq.len() != self.d {
            return Err(Error::Shape(format!(
                "sequence length {} != D = {}",
                seq.len(),
                self.d
            )));
        }
        encode_index(self.k, seq)
    }

    pub fn sequence_of(&self, idx: usize) -> Vec<usize> {
        let mut seq = vec![0; self.d];
        decode_index_into(self.k, idx, &mut seq);
        seq
    }

    pub fn prob(&self, seq: &[usize]) -> Result<T> {
        Ok(self.probs[self.index_of(seq)?])
    }

    /// `(index, probability)` for every state with positive mass.
    pub fn support(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        self.probs
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, p)| *p > T::zero())
    }

    /// Per-position marginal distributions.
    pub fn marginals(&self) -> Vec<Vec<T>> {
        let mut out = vec![vec![T::zero(); self.k]; self.d];
        let mut seq = vec![0; self.d];
        for (idx, p) in self.support() {
            decode_index_into(self.k, idx, &mut seq);
            for (i, &s) in seq.iter().enumerate() {
                out[i][s] += p;
            }
        }
        out
    }

    /// Re-expresses the distribution over a larger vocabulary whose first
    /// `K` tokens coincide with this one's (e.g. after appending a mask).
    pub fn lift_vocab(&self, new_k: usize) -> Result<Self> {
        if new_k < self.k {
            return Err(Error::Validation(format!(
                "cannot shrink vocabulary {} -> {new_k}",
                self.k
            )));
        }
        let size = joint_size(new_k, self.d)?;
        let mut probs = vec![T::zero(); size];
        for (idx, p) in self.support() {
            let seq = self.sequence_of(idx);
            probs[encode_index(new_k, &seq)?] = p;
        }
        Self::new(new_k, self.d, probs)
    }

    /// Total variation distance `1/2 sum |p - q|`.
    pub fn tv(&self, other: &Self) -> Result<f64> {
        if self.k != other.k || self.d != other.d {
            return Err(Error::Shape(
                "TV between distributions on different spaces".into(),
            ));
        }
        Ok(0.5
            * self
                .probs
                .iter()
                .zip(&other.probs)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .sum::<f64>())
    }

    /// Direct inversion sampling.
    pub fn sample(&self, rng: &mut Rng) -> Vec<usize> {
        use rand::Rng as _;
        let mut u = rng.gen::<f64>();
        let mut last = 0;
        for (idx, p) in self.support() {
            let p = p.as_f64();
            last = idx;
            if u < p {
                return self.sequence_of(idx);
            }
            u -= p;
        }
        self.sequence_of(last)
    }
}

pub fn encode_index(k: usize, seq: &[usize]) -> Result<usize> {
    let mut idx = 0usize;
    for &s in seq {
        check_index(s, k)?;
        idx = idx * k + s;
    }
    Ok(idx)
}

pub fn decode_index_into(k: usize, mut idx: usize, out: &mut [usize]) {
    for slot in out.iter_mut().rev() {
        *slot = idx % k;
        idx /= k;
    }
}

/// Applies `matrices[i]` (indexed `[from][to]`) along axis `i` of a joint
/// table: `out[x] = sum_{y} table[y] prod_i matrices[i][y_i][x_i]`.
fn contract_axes<T: Scalar>(k: usize, d: usize, table: &[T], matrices: &[&[Vec<T>]]) -> Vec<T> {
    let mut cur = table.to_vec();
    let mut next = vec![T::zero(); cur.len()];
    for (axis, m) in matrices.iter().enumerate() {
        let stride = k.pow((d - 1 - axis) as u32);
        let block = stride * k;
        next.iter_mut().for_each(|v| *v = T::zero());
        for base in (0..cur.len()).step_by(block) {
            for inner in 0..stride {
                for from in 0..k {
                    let v = cur[base + from * stride + inner];
                    if v == T::zero() {
                        continue;
                    }
                    let row = &m[from];
                    for to in 0..k {
                        next[base + to * stride + inner] += v * row[to];
                    }
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Exact marginal `p_t(x) = sum_{x1} p_t(x | x1) q(x1)`.
pub fn marginal_path<T: Scalar>(
    q: &JointDistribution<T>,
    path: &ConditionalPath<T>,
    t: T,
) -> Result<JointDistribution<T>> {
    if path.k() != q.k() {
        return Err(Error::Shape(format!(
            "path K = {} but q has K = {}",
            path.k(),
            q.k()
        )));
    }
    let m = path.transition_matrix(t)?;
    let axes: Vec<&[Vec<T>]> = vec![m.as_slice(); q.d()];
    let probs = contract_axes(q.k(), q.d(), &q.probs, &axes);
    JointDistribution::new(q.k(), q.d(), probs)
}

/// Exact `d/dt p_t(x)` of the marginal path (product rule over positions).
pub fn marginal_path_dprob<T: Scalar>(
    q: &JointDistribution<T>,
    path: &ConditionalPath<T>,
    t: T,
) -> Result<Vec<T>> {
    if path.k() != q.k() {
        return Err(Error::Shape(format!(
            "path K = {} but q has K = {}",
            path.k(),
            q.k()
        )));
    }
    let m = path.transition_matrix(t)?;
    let dm: Vec<Vec<T>> = (0..q.k())
        .map(|x1| path.path_dprob(t, x1))
        .collect::<Result<_>>()?;
    let mut total = vec![T::zero(); q.len()];
    for i in 0..q.d() {
        let axes: Vec<&[Vec<T>]> = (0..q.d())
            .map(|j| if j == i { dm.as_slice() } else { m.as_slice() })
            .collect();
        for (acc, v) in total
            .iter_mut()
            .zip(contract_axes(q.k(), q.d(), &q.probs, &axes))
        {
            *acc += v;
        }
    }
    Ok(total)
}
