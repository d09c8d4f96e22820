//! Toy tasks with known target distributions, a character tokenizer and
//! corpus ingestion.
//!
//! Every built-in target is a finite mixture of product distributions
//! ([`ProductMixture`]). That family is closed enough to express point
//! masses, multi-modal targets, noisy grids and word lists, while keeping
//! exact `log q` and exact sampling cheap for any vocabulary size. When
//! `K^D` is small the mixture can also be tabulated into a
//! [`JointDistribution`] for the oracle denoiser and TV metrics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;

use crate::denoiser::OracleDenoiser;
use crate::error::{Error, Result};
use crate::paths::{joint_size, ConditionalPath, JointDistribution, PathKind, ENUMERATION_LIMIT};
use crate::rng::{sample_weighted, Rng};
use crate::scalar::is_probability_vector;
use crate::schedule::{BetaSchedule, KappaSchedule};
use crate::token_space::{SpecialTokens, TokenSpace};

pub const TASK_NAMES: [&str; 5] = [
    "point",
    "two_mode",
    "grid_pattern",
    "copy_condition",
    "char_text",
];

/// One training pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub condition: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskMode {
    /// Variable-length text closed by eos and filled with pad.
    Text,
    /// Fixed-length grid of tokens read row-major.
    Grid,
}

/// `q(s) = sum_m w_m prod_i P_m,i(s_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductMixture {
    k: usize,
    d: usize,
    weights: Vec<f64>,
    /// `components[m][i]` is the categorical over `[K]` at position `i`.
    components: Vec<Vec<Vec<f64>>>,
}

impl ProductMixture {
    pub fn new(
        k: usize,
        d: usize,
        weights: Vec<f64>,
        components: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        if weights.len() != components.len() || weights.is_empty() {
            return Err(Error::Shape(
                "mixture needs one weight per component".into(),
            ));
        }
        if !is_probability_vector(&weights, 1e-10) {
            return Err(Error::Validation("mixture weights must sum to one".into()));
        }
        for (m, comp) in components.iter().enumerate() {
            if comp.len() != d {
                return Err(Error::Shape(format!(
                    "component {m} has {} positions, expected {d}",
                    comp.len()
                )));
            }
            for (i, p) in comp.iter().enumerate() {
                if p.len() != k || !is_probability_vector(p, 1e-10) {
                    return Err(Error::Validation(format!(
                        "component {m} position {i} is not a distribution over {k}"
                    )));
                }
            }
        }
        Ok(Self {
            k,
            d,
            weights,
            components,
        })
    }

    /// Uniform mixture of point masses on `sequences`.
    pub fn uniform_over(k: usize, sequences: &[Vec<usize>]) -> Result<Self> {
        let d = sequences.first().map_or(0, Vec::len);
        let mut components = Vec::with_capacity(sequences.len());
        for s in sequences {
            if s.len() != d {
                return Err(Error::Shape("sequences differ in length".into()));
            }
            let comp = s
                .iter()
                .map(|&tok| {
                    crate::error::check_index(tok, k)?;
                    let mut p = vec![0.0; k];
                    p[tok] = 1.0;
                    Ok(p)
                })
                .collect::<Result<_>>()?;
            components.push(comp);
        }
        let n = sequences.len().max(1) as f64;
        Self::new(k, d, vec![1.0 / n; sequences.len()], components)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn log_prob(&self, seq: &[usize]) -> Result<f64> {
        if seq.len() != self.d {
            return Err(Error::Shape(format!(
                "sequence has {} tokens, expected {}",
                seq.len(),
                self.d
            )));
        }
        for &tok in seq {
            crate::error::check_index(tok, self.k)?;
        }
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(&w, comp)| w.ln() + seq.iter().zip(comp).map(|(&s, p)| p[s].ln()).sum::<f64>())
            .collect();
        Ok(crate::scalar::log_sum_exp(&logs))
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<usize> {
        let m = sample_weighted(&self.weights, rng).expect("validated weights");
        self.components[m]
            .iter()
            .map(|p| sample_weighted(p, rng).expect("validated row"))
            .collect()
    }

    /// The single sequence carrying all the mass, if the mixture is
    /// deterministic.
    pub fn point_mass(&self) -> Option<Vec<usize>> {
        let mut seq: Option<Vec<usize>> = None;
        for (&w, comp) in self.weights.iter().zip(&self.components) {
            if w == 0.0 {
                continue;
            }
            let s: Vec<usize> = comp
                .iter()
                .map(|p| p.iter().position(|&v| v == 1.0))
                .collect::<Option<_>>()?;
            match &seq {
                Some(prev) if *prev != s => return None,
                _ => seq = Some(s),
            }
        }
        seq
    }

    /// Tabulates the mixture over all `K^D` sequences.
    pub fn to_joint(&self) -> Result<JointDistribution<f64>> {
        let size = joint_size(self.k, self.d)?;
        let mut probs = vec![0.0; size];
        for (&w, comp) in self.weights.iter().zip(&self.components) {
            let joint = JointDistribution::product(comp)?;
            for (acc, &p) in probs.iter_mut().zip(joint.probs()) {
                *acc += w * p;
            }
        }
        JointDistribution::new(self.k, self.d, probs)
    }
}

/// A toy generation task with a known target per condition.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub name: String,
    pub space: TokenSpace<f64>,
    pub d: usize,
    pub condition_len: usize,
    pub mode: TaskMode,
    /// Target per condition; unconditional tasks use the empty key.
    pub targets: BTreeMap<Vec<usize>, ProductMixture>,
    pub tokenizer: Option<Tokenizer>,
    /// Grid side length for grid tasks.
    pub grid_side: Option<usize>,
}

/// Parameters for the built-in tasks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskOptions {
    /// Side length of the `grid_pattern` grid; the vocabulary is `side^2`.
    pub grid_side: usize,
    /// Probability that a grid cell is replaced by a uniform token.
    pub grid_noise: f64,
}

impl Default for TaskOptions {
    fn default() -> Self {
        Self {
            grid_side: 4,
            grid_noise: 0.1,
        }
    }
}

pub fn builtin_task(name: &str) -> Result<ToyTask> {
    builtin_task_with(name, TaskOptions::default())
}

pub fn builtin_task_with(name: &str, opts: TaskOptions) -> Result<ToyTask> {
    let task = match name {
        "point" => {
            let space = TokenSpace::circle(8, SpecialTokens::default())?;
            unconditional(
                name,
                space,
                TaskMode::Grid,
                ProductMixture::uniform_over(8, &[vec![1, 5, 2]])?,
                None,
            )
        }
        "two_mode" => {
            let space = TokenSpace::circle(8, SpecialTokens::default())?;
            let q = ProductMixture::uniform_over(8, &[vec![0, 0, 0], vec![4, 4, 4]])?;
            unconditional(name, space, TaskMode::Grid, q, None)
        }
        "grid_pattern" => grid_pattern(opts)?,
        "copy_condition" => copy_condition()?,
        "char_text" => char_text()?,
        other => {
            return Err(Error::UnknownTask(format!(
                "{other} (known: {})",
                TASK_NAMES.join(", ")
            )))
        }
    };
    task.validate()?;
    Ok(task)
}

fn unconditional(
    name: &str,
    space: TokenSpace<f64>,
    mode: TaskMode,
    q: ProductMixture,
    grid_side: Option<usize>,
) -> ToyTask {
    ToyTask {
        name: name.to_string(),
        d: q.d(),
        space,
        condition_len: 0,
        mode,
        targets: BTreeMap::from([(Vec::new(), q)]),
        tokenizer: None,
        grid_side,
    }
}

/// Each quadrant of a `side x side` grid carries one color. A base color
/// `c` is uniform over `[K]` and quadrant `j` takes color `(c + j) mod K`;
/// each cell is then replaced by a uniform token with probability `noise`.
fn grid_pattern(opts: TaskOptions) -> Result<ToyTask> {
    let side = opts.grid_side;
    if side < 2 || side % 2 != 0 {
        return Err(Error::Validation(format!(
            "grid side must be even and >= 2, got {side}"
        )));
    }
    if !(0.0..=1.0).contains(&opts.grid_noise) {
        return Err(Error::Validation(format!(
            "grid noise {} outside [0, 1]",
            opts.grid_noise
        )));
    }
    let k = side * side;
    let half = side / 2;
    let cells = side * side;
    let components = (0..k)
        .map(|c| {
            (0..cells)
                .map(|cell| {
                    let (r, col) = (cell / side, cell % side);
                    let quadrant = 2 * usize::from(r >= half) + usize::from(col >= half);
                    let color = (c + quadrant) % k;
                    let mut p = vec![opts.grid_noise / k as f64; k];
                    p[color] += 1.0 - opts.grid_noise;
                    p
                })
                .collect()
        })
        .collect();
    let q = ProductMixture::new(k, cells, vec![1.0 / k as f64; k], components)?;
    let space = TokenSpace::circle(k, SpecialTokens::default())?;
    Ok(unconditional(
        "grid_pattern",
        space,
        TaskMode::Grid,
        q,
        Some(side),
    ))
}

/// Target is the condition reversed, with probability one.
fn copy_condition() -> Result<ToyTask> {
    let (k, len) = (4, 3);
    let mut targets = BTreeMap::new();
    let total = joint_size(k, len)?;
    let mut cond = vec![0; len];
    for idx in 0..total {
        crate::paths::decode_index_into(k, idx, &mut cond);
        let target: Vec<usize> = cond.iter().rev().copied().collect();
        targets.insert(cond.clone(), ProductMixture::uniform_over(k, &[target])?);
    }
    Ok(ToyTask {
        name: "copy_condition".into(),
        space: TokenSpace::circle(k, SpecialTokens::default())?,
        d: len,
        condition_len: len,
        mode: TaskMode::Grid,
        targets,
        tokenizer: None,
        grid_side: None,
    })
}

const CHAR_TEXT_WORDS: [&str; 10] = [
    "a", "ab", "bad", "cab", "dab", "bead", "faced", "decaf", "cafe", "fade",
];
const CHAR_TEXT_LEN: usize = 6;

fn char_text() -> Result<ToyTask> {
    let tokenizer = Tokenizer::from_alphabet("abcdef")?;
    let seqs = CHAR_TEXT_WORDS
        .iter()
        .map(|w| tokenizer.encode(w, CHAR_TEXT_LEN))
        .collect::<Result<Vec<_>>>()?;
    let k = tokenizer.vocab_size();
    let space = TokenSpace::circle(k, SpecialTokens::text(tokenizer.eos(), tokenizer.pad()))?;
    let q = ProductMixture::uniform_over(k, &seqs)?;
    let mut task = unconditional("char_text", space, TaskMode::Text, q, None);
    task.tokenizer = Some(tokenizer);
    Ok(task)
}

impl ToyTask {
    pub fn k(&self) -> usize {
        self.space.k()
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Validation(format!(
                "task {} has no targets",
                self.name
            )));
        }
        for (cond, q) in &self.targets {
            if cond.len() != self.condition_len {
                return Err(Error::Shape(format!(
                    "condition {cond:?} has length != {}",
                    self.condition_len
                )));
            }
            if q.k() != self.k() || q.d() != self.d {
                return Err(Error::Shape(format!(
                    "target for {cond:?} is over [{}]^{}",
                    q.k(),
                    q.d()
                )));
            }
        }
        if self.mode == TaskMode::Text {
            let special = self.space.special();
            if special.eos.is_none() || special.pad.is_none() {
                return Err(Error::Validation(
                    "text tasks need eos and pad tokens".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn conditions(&self) -> impl Iterator<Item = &[usize]> {
        self.targets.keys().map(Vec::as_slice)
    }

    pub fn target(&self, condition: &[usize]) -> Result<&ProductMixture> {
        self.targets.get(condition).ok_or_else(|| {
            Error::InvalidState(format!("task {} has no condition {condition:?}", self.name))
        })
    }

    pub fn log_q(&self, condition: &[usize], seq: &[usize]) -> Result<f64> {
        self.target(condition)?.log_prob(seq)
    }

    pub fn is_enumerable(&self) -> bool {
        joint_size(self.k(), self.d).is_ok_and(|n| n as u128 <= ENUMERATION_LIMIT)
    }

    /// Exact joint target for `condition` over the task vocabulary.
    pub fn joint(&self, condition: &[usize]) -> Result<JointDistribution<f64>> {
        self.target(condition)?.to_joint()
    }

    /// Draws `n` examples, conditions uniform over the task's conditions.
    pub fn dataset(&self, n: usize, rng: &mut Rng) -> Vec<Example> {
        let conds: Vec<&Vec<usize>> = self.targets.keys().collect();
        (0..n)
            .map(|_| {
                let c = conds[rng.gen_range(0..conds.len())];
                Example {
                    condition: c.clone(),
                    target: self.targets[c].sample(rng),
                }
            })
            .collect()
    }

    /// Path over this task's space. The mixture path appends a mask token,
    /// so its vocabulary is `K + 1`.
    pub fn path(
        &self,
        kind: PathKind,
        beta: BetaSchedule<f64>,
        kappa: KappaSchedule,
    ) -> Result<ConditionalPath<f64>> {
        match kind {
            PathKind::Metric => Ok(ConditionalPath::metric(&self.space, beta)),
            PathKind::Mixture => {
                let k = self.k();
                ConditionalPath::mixture_masked(k + 1, k, kappa)
            }
        }
    }

    /// Exact denoiser for `path`, lifting every target to the path
    /// vocabulary when a mask token was appended.
    pub fn oracle(&self, path: &ConditionalPath<f64>) -> Result<OracleDenoiser<f64>> {
        let mut targets = BTreeMap::new();
        for cond in self.targets.keys() {
            let mut q = self.joint(cond)?;
            if path.k() != q.k() {
                q = q.lift_vocab(path.k())?;
            }
            targets.insert(cond.clone(), q);
        }
        OracleDenoiser::conditioned(path.clone(), targets)
    }

    /// Human-readable rendering of one output sequence.
    pub fn render(&self, tokens: &[usize]) -> String {
        match (self.mode, &self.tokenizer, self.grid_side) {
            (TaskMode::Text, Some(tok), _) => tok.decode(tokens).text,
            (_, _, Some(side)) => tokens
                .chunks(side)
                .map(|row| {
                    row.iter()
                        .map(usize::to_string)
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect::<Vec<_>>()
                .join("\n"),
            _ => tokens
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

/// Character-level tokenizer with eos and pad ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    to_id: HashMap<char, usize>,
    to_char: BTreeMap<usize, char>,
    eos: usize,
    pad: usize,
}

pub const EOS_NAME: &str = "<eos>";
pub const PAD_NAME: &str = "<pad>";

/// Result of decoding; `eos_found` is false when the sequence had no eos
/// and was decoded whole.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedText {
    pub text: String,
    pub eos_found: bool,
}

impl Tokenizer {
    /// Characters get ids `0..n` in order; eos is `n`, pad is `n + 1`.
    pub fn from_alphabet(chars: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, c) in chars.chars().enumerate() {
            if map.insert(c, i).is_some() {
                return Err(Error::Construction(format!(
                    "duplicate character {c:?} in alphabet"
                )));
            }
        }
        let n = map.len();
        Self::from_parts(map, n, n + 1)
    }

    fn from_parts(chars: BTreeMap<char, usize>, eos: usize, pad: usize) -> Result<Self> {
        if eos == pad {
            return Err(Error::Construction("eos and pad share an id".into()));
        }
        let mut to_char = BTreeMap::new();
        for (&c, &id) in &chars {
            if id == eos || id == pad || to_char.insert(id, c).is_some() {
                return Err(Error::Construction(format!("token id {id} assigned twice")));
            }
        }
        let k = chars.len() + 2;
        if let Some(bad) = to_char.keys().chain([&eos, &pad]).find(|&&id| id >= k) {
            return Err(Error::Construction(format!(
                "token ids must be dense in 0..{k}, found {bad}"
            )));
        }
        Ok(Self {
            to_id: chars.into_iter().collect(),
            to_char,
            eos,
            pad,
        })
    }

    /// Parses lines `char<TAB>id`, with `<eos>` and `<pad>` naming the
    /// special tokens.
    pub fn parse(text: &str) -> Result<Self> {
        let mut chars = BTreeMap::new();
        let (mut eos, mut pad) = (None, None);
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { line: n + 1, msg };
            let (key, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| parse_err("expected `char<TAB>id`".into()))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad id: {e}")))?;
            match key {
                EOS_NAME => eos = Some(id),
                PAD_NAME => pad = Some(id),
                _ => {
                    let mut it = key.chars();
                    let c = match (it.next(), it.next()) {
                        (Some(c), None) => c,
                        _ => {
                            return Err(parse_err(format!("key {key:?} is not a single character")))
                        }
                    };
                    if chars.insert(c, id).is_some() {
                        return Err(parse_err(format!("character {c:?} listed twice")));
                    }
                }
            }
        }
        let eos = eos.ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("missing {EOS_NAME}"),
        })?;
        let pad = pad.ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("missing {PAD_NAME}"),
        })?;
        Self::from_parts(chars, eos, pad)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_map_text(&self) -> String {
        let mut out = String::new();
        for (&id, &c) in &self.to_char {
            let _ = writeln!(out, "{c}\t{id}");
        }
        let _ = writeln!(out, "{EOS_NAME}\t{}", self.eos);
        let _ = writeln!(out, "{PAD_NAME}\t{}", self.pad);
        out
    }

    pub fn vocab_size(&self) -> usize {
        self.to_char.len() + 2
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    /// Characters, then one eos, then pads up to exactly `len` tokens.
    pub fn encode(&self, text: &str, len: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(len);
        for (offset, c) in text.char_indices() {
            let id = self.to_id.get(&c).ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("unknown character {c:?} at byte offset {offset}"),
            })?;
            out.push(*id);
        }
        if out.len() + 1 > len {
            return Err(Error::Validation(format!(
                "text of {} characters does not fit length {len} with eos",
                out.len()
            )));
        }
        out.push(self.eos);
        out.resize(len, self.pad);
        Ok(out)
    }

    /// Characters before the first eos. Pad tokens are skipped and ids with no
    /// character decode to U+FFFD.
    pub fn decode(&self, tokens: &[usize]) -> DecodedText {
        let cut = tokens.iter().position(|&t| t == self.eos);
        let text = tokens[..cut.unwrap_or(tokens.len())]
            .iter()
            .filter(|&&t| t != self.pad)
            .map(|t| self.to_char.get(t).copied().unwrap_or('\u{FFFD}'))
            .collect();
        DecodedText {
            text,
            eos_found: cut.is_some(),
        }
    }
}

/// Decodes `tokens`, logging when no eos was found.
pub fn decode_text(tokenizer: &Tokenizer, tokens: &[usize]) -> DecodedText {
    let out = tokenizer.decode(tokens);
    if !out.eos_found {
        log::warn!("sequence has no eos token; decoded in full");
    }
    out
}

/// Reads a newline-delimited UTF-8 corpus. Each line is a target, or
/// `condition<TAB>target`; both sides are encoded and padded to `len`.
pub fn ingest_corpus(path: &Path, tokenizer: &Tokenizer, len: usize) -> Result<Vec<Example>> {
    parse_corpus(&std::fs::read_to_string(path)?, tokenizer, len)
}

pub fn parse_corpus(text: &str, tokenizer: &Tokenizer, len: usize) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    let mut line_start = 0;
    for (n, raw) in text.split_inclusive('\n').enumerate() {
        let line = raw.strip_suffix('\n').unwrap_or(raw);
        let line = line.strip_suffix('\r').unwrap_or(line);
        let base = line_start;
        line_start += raw.len();
        let encode = |s: &str, offset: usize| {
            tokenizer.encode(s, len).map_err(|e| {
                let msg = match e {
                    Error::Parse { msg, .. } => relocate_offset(&msg, base + offset),
                    other => other.to_string(),
                };
                Error::Parse { line: n + 1, msg }
            })
        };
        let example = match line.split_once('\t') {
            Some((cond, target)) => Example {
                condition: encode(cond, 0)?,
                target: encode(target, cond.len() + 1)?,
            },
            None => Example {
                condition: Vec::new(),
                target: encode(line, 0)?,
            },
        };
        out.push(example);
    }
    Ok(out)
}

/// Rewrites the in-line byte offset of an encoding error to a file offset.
fn relocate_offset(msg: &str, base: usize) -> String {
    match msg.rsplit_once("byte offset ") {
        Some((head, off)) => match off.parse::<usize>() {
            Ok(o) => format!("{head}byte offset {}", base + o),
            Err(_) => msg.to_string(),
        },
        None => msg.to_string(),
    }
}
