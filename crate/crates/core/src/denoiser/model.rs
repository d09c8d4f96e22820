//! A small full-context predictor: token embeddings for every condition and
//! target position are concatenated, mixed by two `tanh` dense layers, and
//! read out by one linear head per target position.

use std::fmt::Write as _;

use rand::Rng as _;

use super::{Denoiser, Posterior};
use crate::error::{check_index, Error, Result};
use crate::rng::substream;
use crate::scalar::{log_sum_exp, softmax_into};

pub const CHECKPOINT_HEADER: &str = "dfm-ckpt v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub k: usize,
    pub cond_len: usize,
    pub target_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparameters {
    pub embed_dim: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub time_embedding: bool,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            hidden: 64,
            learning_rate: 0.1,
            batch_size: 32,
            steps: 20_000,
            time_embedding: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    inputs: usize,
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    heads: usize,
    head_bias: usize,
    total: usize,
}

impl Layout {
    fn new(shape: &ModelShape, hyper: &Hyperparameters) -> Self {
        let h = hyper.embed_dim;
        let m = hyper.hidden;
        let inputs = (shape.cond_len + shape.target_len) * h + usize::from(hyper.time_embedding);
        let emb = 0;
        let w1 = emb + shape.k * h;
        let b1 = w1 + m * inputs;
        let w2 = b1 + m;
        let b2 = w2 + m * m;
        let heads = b2 + m;
        let head_bias = heads + shape.target_len * shape.k * m;
        let total = head_bias + shape.target_len * shape.k;
        Self {
            inputs,
            emb,
            w1,
            b1,
            w2,
            b2,
            heads,
            head_bias,
            total,
        }
    }
}

/// Activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedModel {
    pub shape: ModelShape,
    pub hyper: Hyperparameters,
    params: Vec<f64>,
    layout: Layout,
}

impl FactorizedModel {
    /// Randomly initialized model; the draw uses the `model.init` substream.
    pub fn new(shape: ModelShape, hyper: Hyperparameters, seed: u64) -> Result<Self> {
        if shape.k < 2 || shape.target_len == 0 {
            return Err(Error::Validation(
                "model needs K >= 2 and at least one target position".into(),
            ));
        }
        if hyper.embed_dim == 0 || hyper.hidden == 0 || hyper.batch_size == 0 {
            return Err(Error::Validation(
                "embed_dim, hidden and batch_size must be positive".into(),
            ));
        }
        let layout = Layout::new(&shape, &hyper);
        let mut rng = substream(seed, "model.init");
        let mut params = vec![0.0; layout.total];
        let mut fill = |range: std::ops::Range<usize>, scale: f64| {
            for p in &mut params[range] {
                *p = rng.gen_range(-scale..scale);
            }
        };
        let m = hyper.hidden;
        fill(layout.emb..layout.w1, 1.0);
        fill(layout.w1..layout.b1, (3.0 / layout.inputs as f64).sqrt());
        fill(layout.w2..layout.b2, (3.0 / m as f64).sqrt());
        fill(
            layout.heads..layout.head_bias,
            (3.0 / m as f64).sqrt() * 0.1,
        );
        Ok(Self {
            shape,
            hyper,
            params,
            layout,
        })
    }

    pub fn from_params(
        shape: ModelShape,
        hyper: Hyperparameters,
        params: Vec<f64>,
    ) -> Result<Self> {
        let layout = Layout::new(&shape, &hyper);
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            shape,
            hyper,
            params,
            layout,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Index range of the embedding row of `token`.
    pub fn embedding_range(&self, token: usize) -> std::ops::Range<usize> {
        let h = self.hyper.embed_dim;
        self.layout.emb + token * h..self.layout.emb + (token + 1) * h
    }

    pub fn head_weight_range(&self) -> std::ops::Range<usize> {
        self.layout.heads..self.layout.head_bias
    }

    /// Index range of the output-head biases of target position `i`.
    pub fn head_bias_range(&self, i: usize) -> std::ops::Range<usize> {
        let k = self.shape.k;
        self.layout.head_bias + i * k..self.layout.head_bias + (i + 1) * k
    }

    fn validate_input(&self, condition: &[usize], tokens: &[usize]) -> Result<()> {
        if condition.len() != self.shape.cond_len || tokens.len() != self.shape.target_len {
            return Err(Error::Shape(format!(
                "model expects {} condition and {} target tokens, got {} and {}",
                self.shape.cond_len,
                self.shape.target_len,
                condition.len(),
                tokens.len()
            )));
        }
        for &tok in condition.iter().chain(tokens) {
            check_index(tok, self.shape.k)?;
        }
        Ok(())
    }

    pub fn forward_cached(
        &self,
        condition: &[usize],
        tokens: &[usize],
        t: f64,
    ) -> Result<ForwardCache> {
        self.validate_input(condition, tokens)?;
        let l = &self.layout;
        let p = &self.params;
        let h = self.hyper.embed_dim;
        let m = self.hyper.hidden;
        let k = self.shape.k;

        let mut input = Vec::with_capacity(l.inputs);
        for &tok in condition.iter().chain(tokens) {
            input.extend_from_slice(&p[l.emb + tok * h..l.emb + (tok + 1) * h]);
        }
        if self.hyper.time_embedding {
            input.push(t);
        }

        let h1: Vec<f64> = (0..m)
            .map(|r| {
                let row = &p[l.w1 + r * l.inputs..l.w1 + (r + 1) * l.inputs];
                (p[l.b1 + r] + dot(row, &input)).tanh()
            })
            .collect();
        let h2: Vec<f64> = (0..m)
            .map(|r| {
                let row = &p[l.w2 + r * m..l.w2 + (r + 1) * m];
                (p[l.b2 + r] + dot(row, &h1)).tanh()
            })
            .collect();
        let mut logits = vec![0.0; self.shape.target_len * k];
        for (o, logit) in logits.iter_mut().enumerate() {
            let row = &p[l.heads + o * m..l.heads + (o + 1) * m];
            *logit = p[l.head_bias + o] + dot(row, &h2);
        }
        Ok(ForwardCache {
            input,
            h1,
            h2,
            logits,
        })
    }

    /// Per-position logits, `D` rows of `K`.
    pub fn forward(&self, condition: &[usize], tokens: &[usize], t: f64) -> Result<Vec<f64>> {
        Ok(self.forward_cached(condition, tokens, t)?.logits)
    }

    /// `-sum_i ln softmax(logits_i)[target_i]` for one example.
    pub fn example_loss(
        &self,
        condition: &[usize],
        tokens: &[usize],
        t: f64,
        target: &[usize],
    ) -> Result<f64> {
        let logits = self.forward(condition, tokens, t)?;
        sequence_nll(&logits, self.shape.k, target)
    }

    /// Adds `scale * d(example loss)/d(params)` into `grad` and returns the
    /// example loss.
    pub fn accumulate_grad(
        &self,
        condition: &[usize],
        tokens: &[usize],
        t: f64,
        target: &[usize],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let cache = self.forward_cached(condition, tokens, t)?;
        let loss = sequence_nll(&cache.logits, self.shape.k, target)?;
        let l = &self.layout;
        let p = &self.params;
        let h = self.hyper.embed_dim;
        let m = self.hyper.hidden;
        let k = self.shape.k;

        let mut dh2 = vec![0.0; m];
        let mut probs = vec![0.0; k];
        for (i, &y) in target.iter().enumerate() {
            softmax_into(&cache.logits[i * k..(i + 1) * k], &mut probs);
            probs[y] -= 1.0;
            for (v, &g) in probs.iter().enumerate() {
                let g = g * scale;
                let o = i * k + v;
                grad[l.head_bias + o] += g;
                let w = l.heads + o * m;
                for r in 0..m {
                    grad[w + r] += g * cache.h2[r];
                    dh2[r] += g * p[w + r];
                }
            }
        }

        let da2: Vec<f64> = dh2
            .iter()
            .zip(&cache.h2)
            .map(|(&g, &a)| g * (1.0 - a * a))
            .collect();
        let mut dh1 = vec![0.0; m];
        for (r, &g) in da2.iter().enumerate() {
            grad[l.b2 + r] += g;
            let w = l.w2 + r * m;
            for c in 0..m {
                grad[w + c] += g * cache.h1[c];
                dh1[c] += g * p[w + c];
            }
        }

        let da1: Vec<f64> = dh1
            .iter()
            .zip(&cache.h1)
            .map(|(&g, &a)| g * (1.0 - a * a))
            .collect();
        let mut dinput = vec![0.0; l.inputs];
        for (r, &g) in da1.iter().enumerate() {
            grad[l.b1 + r] += g;
            let w = l.w1 + r * l.inputs;
            for c in 0..l.inputs {
                grad[w + c] += g * cache.input[c];
                dinput[c] += g * p[w + c];
            }
        }

        for (slot, &tok) in condition.iter().chain(tokens).enumerate() {
            let src = &dinput[slot * h..(slot + 1) * h];
            for (gd, &gs) in grad[l.emb + tok * h..l.emb + (tok + 1) * h]
                .iter_mut()
                .zip(src)
            {
                *gd += gs;
            }
        }
        Ok(loss)
    }

    pub fn to_checkpoint_text(&self) -> String {
        let s = &self.shape;
        let h = &self.hyper;
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_HEADER}");
        let _ = writeln!(out, "k {}", s.k);
        let _ = writeln!(out, "cond_len {}", s.cond_len);
        let _ = writeln!(out, "target_len {}", s.target_len);
        let _ = writeln!(out, "embed_dim {}", h.embed_dim);
        let _ = writeln!(out, "hidden {}", h.hidden);
        let _ = writeln!(out, "learning_rate {}", h.learning_rate);
        let _ = writeln!(out, "batch_size {}", h.batch_size);
        let _ = writeln!(out, "steps {}", h.steps);
        let _ = writeln!(out, "time_embedding {}", h.time_embedding);
        let _ = writeln!(out, "params {}", self.params.len());
        for v in &self.params {
            let _ = writeln!(out, "{v:e}");
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Negative log-likelihood of `target` under per-position logits.
pub(crate) fn sequence_nll(logits: &[f64], k: usize, target: &[usize]) -> Result<f64> {
    if logits.len() != target.len() * k {
        return Err(Error::Shape("logits and target lengths differ".into()));
    }
    let mut total = 0.0;
    for (i, &y) in target.iter().enumerate() {
        check_index(y, k)?;
        let row = &logits[i * k..(i + 1) * k];
        total += log_sum_exp(row) - row[y];
    }
    Ok(total)
}

/// Parses a `dfm-ckpt v1` checkpoint.
pub fn read_checkpoint(text: &str) -> Result<FactorizedModel> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, h)) if h == CHECKPOINT_HEADER => {}
        Some((n, h)) => {
            return Err(Error::Parse {
                line: n,
                msg: format!("expected `{CHECKPOINT_HEADER}`, got `{h}`"),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty checkpoint".into(),
            })
        }
    }
    let mut field = |name: &str| -> Result<(usize, String)> {
        let (n, line) = lines.next().ok_or(Error::Parse {
            line: 0,
            msg: format!("missing `{name}`"),
        })?;
        let mut parts = line.splitn(2, ' ');
        if parts.next() != Some(name) {
            return Err(Error::Parse {
                line: n,
                msg: format!("expected `{name}`, got `{line}`"),
            });
        }
        Ok((n, parts.next().unwrap_or("").trim().to_string()))
    };
    fn num<V: std::str::FromStr>(n: usize, v: &str) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        v.parse::<V>().map_err(|e| Error::Parse {
            line: n,
            msg: format!("`{v}`: {e}"),
        })
    }
    let (n, v) = field("k")?;
    let k = num(n, &v)?;
    let (n, v) = field("cond_len")?;
    let cond_len = num(n, &v)?;
    let (n, v) = field("target_len")?;
    let target_len = num(n, &v)?;
    let (n, v) = field("embed_dim")?;
    let embed_dim = num(n, &v)?;
    let (n, v) = field("hidden")?;
    let hidden = num(n, &v)?;
    let (n, v) = field("learning_rate")?;
    let learning_rate = num(n, &v)?;
    let (n, v) = field("batch_size")?;
    let batch_size = num(n, &v)?;
    let (n, v) = field("steps")?;
    let steps = num(n, &v)?;
    let (n, v) = field("time_embedding")?;
    let time_embedding = num(n, &v)?;
    let (n, v) = field("params")?;
    let count: usize = num(n, &v)?;
    let mut params = Vec::with_capacity(count);
    for (n, line) in lines.by_ref().take(count) {
        params.push(num::<f64>(n, line)?);
    }
    if params.len() != count {
        return Err(Error::Parse {
            line: n,
            msg: format!("declared {count} parameters, found {}", params.len()),
        });
    }
    FactorizedModel::from_params(
        ModelShape {
            k,
            cond_len,
            target_len,
        },
        Hyperparameters {
            embed_dim,
            hidden,
            learning_rate,
            batch_size,
            steps,
            time_embedding,
        },
        params,
    )
}

impl Denoiser<f64> for FactorizedModel {
    fn k(&self) -> usize {
        self.shape.k
    }

    fn posterior(&self, t: f64, condition: &[usize], tokens: &[usize]) -> Result<Posterior<f64>> {
        let logits = self.forward(condition, tokens, t)?;
        let k = self.shape.k;
        let mut probs = vec![0.0; logits.len()];
        for (src, dst) in logits.chunks(k).zip(probs.chunks_mut(k)) {
            softmax_into(src, dst);
        }
        Posterior::from_rows(k, probs)
    }
}
