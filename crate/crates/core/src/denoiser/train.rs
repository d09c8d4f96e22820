//! Cross-entropy training of [`FactorizedModel`] with plain SGD.

use std::fmt::Write as _;

use rand::Rng as _;
use rayon::prelude::*;

use super::model::{sequence_nll, FactorizedModel};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::paths::ConditionalPath;
use crate::rng::{substream, Rng};

/// Examples per gradient chunk. Chunks are reduced in index order, so the
/// summation order does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

/// One minibatch: each example carries its own time and corrupted input.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub conditions: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub times: Vec<f64>,
    pub corrupted: Vec<Vec<usize>>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.targets.len();
        if n == 0
            || self.conditions.len() != n
            || self.times.len() != n
            || self.corrupted.len() != n
        {
            return Err(Error::Shape("inconsistent or empty training batch".into()));
        }
        Ok(())
    }
}

/// Draws `batch_size` examples uniformly with replacement, a time
/// `t ~ U[0, 1)` per example, and `x_t ~ p_t(. | x1)`.
pub fn make_batch(
    path: &ConditionalPath<f64>,
    dataset: &[Example],
    batch_size: usize,
    rng: &mut Rng,
) -> Result<TrainBatch> {
    if dataset.is_empty() {
        return Err(Error::Validation("empty dataset".into()));
    }
    let mut batch = TrainBatch {
        conditions: vec![],
        targets: vec![],
        times: vec![],
        corrupted: vec![],
    };
    for _ in 0..batch_size {
        let ex = &dataset[rng.gen_range(0..dataset.len())];
        let t: f64 = rng.gen();
        batch
            .corrupted
            .push(path.sample_corrupted(t, &ex.target, rng)?);
        batch.conditions.push(ex.condition.clone());
        batch.targets.push(ex.target.clone());
        batch.times.push(t);
    }
    Ok(batch)
}

/// Mean over the batch of the per-sequence cross-entropy.
pub fn ce_loss(model: &FactorizedModel, batch: &TrainBatch) -> Result<f64> {
    batch.validate()?;
    let mut total = 0.0;
    for i in 0..batch.len() {
        let logits = model.forward(&batch.conditions[i], &batch.corrupted[i], batch.times[i])?;
        total += sequence_nll(&logits, model.shape.k, &batch.targets[i])?;
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of [`ce_loss`] with respect to every parameter, together with
/// the loss itself.
pub fn loss_and_grad(model: &FactorizedModel, batch: &TrainBatch) -> Result<(f64, Vec<f64>)> {
    batch.validate()?;
    let scale = 1.0 / batch.len() as f64;
    let chunks: Vec<Result<(f64, Vec<f64>)>> = (0..batch.len())
        .collect::<Vec<_>>()
        .par_chunks(GRAD_CHUNK)
        .map(|idx| {
            let mut g = vec![0.0; model.num_params()];
            let mut loss = 0.0;
            for &i in idx {
                loss += model.accumulate_grad(
                    &batch.conditions[i],
                    &batch.corrupted[i],
                    batch.times[i],
                    &batch.targets[i],
                    scale,
                    &mut g,
                )?;
            }
            Ok((loss, g))
        })
        .collect();
    let mut grad = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    for chunk in chunks {
        let (l, g) = chunk?;
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((loss * scale, grad))
}

pub fn grad(model: &FactorizedModel, batch: &TrainBatch) -> Result<Vec<f64>> {
    Ok(loss_and_grad(model, batch)?.1)
}

/// Step-wise SGD driver. Keeps the model untouched when a step produces a
/// non-finite loss, so callers can persist the last finite parameters.
pub struct Trainer<'a> {
    pub model: FactorizedModel,
    path: &'a ConditionalPath<f64>,
    dataset: &'a [Example],
    rng: Rng,
    pub curve: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: FactorizedModel,
        path: &'a ConditionalPath<f64>,
        dataset: &'a [Example],
        seed: u64,
    ) -> Result<Self> {
        if path.k() != model.shape.k {
            return Err(Error::Shape(format!(
                "path K = {} but model K = {}",
                path.k(),
                model.shape.k
            )));
        }
        if dataset.is_empty() {
            return Err(Error::Validation("empty dataset".into()));
        }
        Ok(Self {
            model,
            path,
            dataset,
            rng: substream(seed, "train"),
            curve: Vec::new(),
        })
    }

    /// Runs one SGD step and returns the pre-update batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let batch = make_batch(
            self.path,
            self.dataset,
            self.model.hyper.batch_size,
            &mut self.rng,
        )?;
        let (loss, g) = loss_and_grad(&self.model, &batch)?;
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: self.curve.len(),
                loss,
            });
        }
        let lr = self.model.hyper.learning_rate;
        for (p, gi) in self.model.params_mut().iter_mut().zip(&g) {
            *p -= lr * gi;
        }
        self.curve.push(loss);
        Ok(loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: FactorizedModel,
    pub curve: Vec<f64>,
}

/// Trains for `model.hyper.steps` SGD steps.
pub fn train(
    model: FactorizedModel,
    path: &ConditionalPath<f64>,
    dataset: &[Example],
    seed: u64,
) -> Result<TrainRun> {
    let steps = model.hyper.steps;
    let mut trainer = Trainer::new(model, path, dataset, seed)?;
    for _ in 0..steps {
        trainer.step()?;
    }
    Ok(TrainRun {
        model: trainer.model,
        curve: trainer.curve,
    })
}

/// `step,loss` CSV with a header row.
pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(out, "{i},{l}");
    }
    out
}
