//! Denoisers: predictors of `p_{1|t}(. | x_t)` for every target position.
//!
//! [`OracleDenoiser`] computes the exact posterior by enumerating the target
//! distribution; [`FactorizedModel`] is a small trainable predictor.

mod model;
mod train;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::paths::{decode_index_into, ConditionalPath, JointDistribution, SequenceState};
use crate::scalar::{argmax, Scalar};

pub use model::{
    read_checkpoint, FactorizedModel, ForwardCache, Hyperparameters, ModelShape, CHECKPOINT_HEADER,
};
pub use train::{
    ce_loss, grad, loss_and_grad, loss_curve_csv, make_batch, train, TrainBatch, TrainRun, Trainer,
};

/// Per-position categorical distributions, `D` rows of `K` probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior<T> {
    k: usize,
    probs: Vec<T>,
}

impl<T: Scalar> Posterior<T> {
    pub fn from_rows(k: usize, probs: Vec<T>) -> Result<Self> {
        if k == 0 || probs.len() % k != 0 {
            return Err(Error::Shape(format!(
                "{} probabilities do not form rows of {k}",
                probs.len()
            )));
        }
        Ok(Self { k, probs })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.probs.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.probs.chunks(self.k)
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.rows().map(argmax).collect()
    }
}

/// Anything producing `p_{1|t}` for a state.
pub trait Denoiser<T: Scalar>: Sync {
    fn k(&self) -> usize;

    fn posterior(&self, t: T, condition: &[usize], tokens: &[usize]) -> Result<Posterior<T>>;
}

/// Exact Bayes posterior under a known target distribution `q`, optionally
/// one distribution per condition.
#[derive(Debug, Clone)]
pub struct OracleDenoiser<T> {
    path: ConditionalPath<T>,
    targets: BTreeMap<Vec<usize>, JointDistribution<T>>,
}

impl<T: Scalar> OracleDenoiser<T> {
    pub fn new(path: ConditionalPath<T>, q: JointDistribution<T>) -> Result<Self> {
        Self::conditioned(path, BTreeMap::from([(Vec::new(), q)]))
    }

    pub fn conditioned(
        path: ConditionalPath<T>,
        targets: BTreeMap<Vec<usize>, JointDistribution<T>>,
    ) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Validation(
                "oracle needs at least one target distribution".into(),
            ));
        }
        for q in targets.values() {
            if q.k() != path.k() {
                return Err(Error::Shape(format!(
                    "path K = {} but q has K = {}",
                    path.k(),
                    q.k()
                )));
            }
        }
        Ok(Self { path, targets })
    }

    pub fn path(&self) -> &ConditionalPath<T> {
        &self.path
    }

    pub fn target(&self, condition: &[usize]) -> Result<&JointDistribution<T>> {
        self.targets.get(condition).ok_or_else(|| {
            Error::InvalidState(format!(
                "no target distribution for condition {condition:?}"
            ))
        })
    }

    /// Joint posterior `q(x1 | x_t)` over all target sequences, as a table
    /// aligned with `q`'s indexing.
    pub fn joint_posterior(&self, t: T, condition: &[usize], tokens: &[usize]) -> Result<Vec<T>> {
        let q = self.target(condition)?;
        let weights = self.log_weights(q, t, tokens)?;
        let mut out = vec![T::zero(); q.len()];
        let (max, _) = max_weight(&weights)?;
        let mut total = T::zero();
        for &(idx, lw) in &weights {
            let w = (lw - max).exp();
            out[idx] = w;
            total += w;
        }
        out.iter_mut().for_each(|v| *v = *v / total);
        Ok(out)
    }

    fn log_weights(
        &self,
        q: &JointDistribution<T>,
        t: T,
        tokens: &[usize],
    ) -> Result<Vec<(usize, T)>> {
        if tokens.len() != q.d() {
            return Err(Error::Shape(format!(
                "state has {} tokens, q has D = {}",
                tokens.len(),
                q.d()
            )));
        }
        let k = q.k();
        for &tok in tokens {
            crate::error::check_index(tok, k)?;
        }
        // loglik[v][x] = ln p_t(x | v)
        let loglik: Vec<Vec<T>> = (0..k)
            .map(|v| self.path.path_log_prob(t, v))
            .collect::<Result<_>>()?;
        let mut seq = vec![0; q.d()];
        let mut out = Vec::new();
        for (idx, p) in q.support() {
            decode_index_into(k, idx, &mut seq);
            let mut lw = p.ln();
            for (i, &v) in seq.iter().enumerate() {
                lw += loglik[v][tokens[i]];
            }
            if lw > T::neg_infinity() {
                out.push((idx, lw));
            }
        }
        Ok(out)
    }

    pub fn oracle_posterior(&self, t: T, state: &SequenceState<T>) -> Result<Posterior<T>> {
        self.posterior(t, &state.condition, &state.tokens)
    }

    /// Per-position Bayes rule against the marginals of `q`, used when the
    /// state as a whole has zero probability. Mask-path sampling reaches such
    /// states when two positions unmask toward different modes in the same
    /// step.
    fn factorized_posterior(
        &self,
        q: &JointDistribution<T>,
        t: T,
        tokens: &[usize],
    ) -> Result<Posterior<T>> {
        let k = q.k();
        let marginals = q.marginals();
        let mut probs = Vec::with_capacity(q.d() * k);
        for (i, &x) in tokens.iter().enumerate() {
            let lw: Vec<T> = (0..k)
                .map(|v| Ok(marginals[i][v].ln() + self.path.path_log_prob(t, v)?[x]))
                .collect::<Result<_>>()?;
            let max = lw.iter().copied().fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(Error::InvalidState(format!(
                    "token {x} at position {i} has zero probability under every target"
                )));
            }
            let w: Vec<T> = lw.iter().map(|&l| (l - max).exp()).collect();
            let total: T = w.iter().copied().sum();
            probs.extend(w.into_iter().map(|v| v / total));
        }
        Posterior::from_rows(k, probs)
    }
}

fn max_weight<T: Scalar>(weights: &[(usize, T)]) -> Result<(T, usize)> {
    weights
        .iter()
        .map(|&(i, w)| (w, i))
        .fold(None, |acc: Option<(T, usize)>, (w, i)| match acc {
            Some((m, j)) if m >= w => Some((m, j)),
            _ => Some((w, i)),
        })
        .ok_or_else(|| {
            Error::InvalidState("state has zero probability under every target sequence".into())
        })
}

impl<T: Scalar> Denoiser<T> for OracleDenoiser<T> {
    fn k(&self) -> usize {
        self.path.k()
    }

    fn posterior(&self, t: T, condition: &[usize], tokens: &[usize]) -> Result<Posterior<T>> {
        let q = self.target(condition)?;
        let k = q.k();
        let weights = self.log_weights(q, t, tokens)?;
        if weights.is_empty() {
            return self.factorized_posterior(q, t, tokens);
        }
        let (max, _) = max_weight(&weights)?;
        let mut probs = vec![T::zero(); q.d() * k];
        let mut seq = vec![0; q.d()];
        let mut total = T::zero();
        for &(idx, lw) in &weights {
            let w = (lw - max).exp();
            total += w;
            decode_index_into(k, idx, &mut seq);
            for (i, &v) in seq.iter().enumerate() {
                probs[i * k + v] += w;
            }
        }
        probs.iter_mut().for_each(|v| *v = *v / total);
        Posterior::from_rows(k, probs)
    }
}
