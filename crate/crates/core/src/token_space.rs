//! Finite vocabularies with unit-normalized embeddings and the pairwise
//! distance table they induce.
//!
//! The distance between two tokens is the L2 distance between their
//! normalized embeddings. Distances are computed once per unordered pair and
//! mirrored, so `d(a, b)` and `d(b, a)` are bit-identical.

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

use crate::error::{check_index, Error, Result};
use crate::scalar::Scalar;

const NORM_TOLERANCE: f64 = 1e-9;
pub const EMBEDDING_HEADER: &str = "dfm-emb";
pub const EMBEDDING_VERSION: &str = "v1";

/// Optional special token indices. `eos`/`pad` are used by text tasks, `mask`
/// by the mixture path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SpecialTokens {
    pub eos: Option<usize>,
    pub pad: Option<usize>,
    pub mask: Option<usize>,
}

impl SpecialTokens {
    pub fn text(eos: usize, pad: usize) -> Self {
        Self {
            eos: Some(eos),
            pad: Some(pad),
            mask: None,
        }
    }

    fn validate(&self, k: usize) -> Result<()> {
        for (name, idx) in [("eos", self.eos), ("pad", self.pad), ("mask", self.mask)] {
            if let Some(i) = idx {
                if i >= k {
                    return Err(Error::Construction(format!(
                        "{name} token index {i} is not below vocabulary size {k}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Dense `K x K` table of non-negative distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTable<T> {
    k: usize,
    d: Vec<T>,
}

impl<T: Scalar> DistanceTable<T> {
    /// Builds a table from a row-major `K x K` matrix, enforcing a zero
    /// diagonal, positive off-diagonals and symmetry.
    pub fn from_matrix(k: usize, d: Vec<T>) -> Result<Self> {
        let table = Self::from_matrix_asymmetric(k, d)?;
        for a in 0..k {
            for b in (a + 1)..k {
                if table.get(a, b) != table.get(b, a) {
                    return Err(Error::Construction(format!(
                        "distance table is not symmetric at ({a}, {b})"
                    )));
                }
            }
        }
        Ok(table)
    }

    /// Like [`DistanceTable::from_matrix`] but without the symmetry
    /// requirement. The velocity identities only use the column `d(., x1)`,
    /// so robustness probes build asymmetric tables through here.
    pub fn from_matrix_asymmetric(k: usize, d: Vec<T>) -> Result<Self> {
        if k < 2 {
            return Err(Error::Construction(format!("vocabulary size {k} < 2")));
        }
        if d.len() != k * k {
            return Err(Error::Shape(format!(
                "expected {} entries, got {}",
                k * k,
                d.len()
            )));
        }
        for a in 0..k {
            for b in 0..k {
                let v = d[a * k + b];
                if !v.is_finite() || v < T::zero() {
                    return Err(Error::Construction(format!(
                        "invalid distance {v} at ({a}, {b})"
                    )));
                }
                if (a == b) != (v == T::zero()) {
                    return Err(Error::Construction(format!(
                        "distance at ({a}, {b}) must be zero exactly on the diagonal"
                    )));
                }
            }
        }
        Ok(Self { k, d })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Unchecked lookup; callers validate indices.
    #[inline]
    pub fn get(&self, a: usize, b: usize) -> T {
        self.d[a * self.k + b]
    }

    /// `d(x, target)` for every `x`.
    pub fn column(&self, target: usize) -> Vec<T> {
        (0..self.k).map(|x| self.get(x, target)).collect()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.k).all(|a| (0..self.k).all(|b| self.get(a, b) == self.get(b, a)))
    }
}

/// A vocabulary of `K` tokens with unit-norm embeddings of dimension `E`.
#[derive(Debug, Clone)]
pub struct TokenSpace<T> {
    dim: usize,
    embeddings: Vec<T>,
    distances: Arc<DistanceTable<T>>,
    special: SpecialTokens,
}

impl<T: Scalar> TokenSpace<T> {
    /// Normalizes `raw` and precomputes all pairwise distances.
    pub fn new(raw: &[Vec<T>], special: SpecialTokens) -> Result<Self> {
        let k = raw.len();
        if k < 2 {
            return Err(Error::Construction(format!("vocabulary size {k} < 2")));
        }
        let dim = raw[0].len();
        if dim == 0 {
            return Err(Error::Construction(
                "embedding dimension must be >= 1".into(),
            ));
        }
        special.validate(k)?;

        let mut embeddings = Vec::with_capacity(k * dim);
        for (i, v) in raw.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::Shape(format!(
                    "embedding {i} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Construction(format!("embedding {i} is not finite")));
            }
            let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(Error::Construction(format!(
                    "embedding {i} is the zero vector"
                )));
            }
            let start = embeddings.len();
            embeddings.extend(v.iter().map(|&x| x / norm));
            let renorm = embeddings[start..].iter().map(|&x| x * x).sum::<T>().sqrt();
            if (renorm.as_f64() - 1.0).abs() > NORM_TOLERANCE.max(T::epsilon().as_f64() * 16.0) {
                return Err(Error::Construction(format!(
                    "embedding {i} failed to normalize"
                )));
            }
        }

        let mut d = vec![T::zero(); k * k];
        for a in 0..k {
            for b in (a + 1)..k {
                let ea = &embeddings[a * dim..(a + 1) * dim];
                let eb = &embeddings[b * dim..(b + 1) * dim];
                let dist = ea
                    .iter()
                    .zip(eb)
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum::<T>()
                    .sqrt();
                if dist == T::zero() {
                    return Err(Error::Construction(format!(
                        "tokens {a} and {b} have identical normalized embeddings"
                    )));
                }
                d[a * k + b] = dist;
                d[b * k + a] = dist;
            }
        }

        Ok(Self {
            dim,
            embeddings,
            distances: Arc::new(DistanceTable { k, d }),
            special,
        })
    }

    /// Tokens placed evenly on the unit circle: neighbours in index order are
    /// close, index `K/2` apart is farthest.
    pub fn circle(k: usize, special: SpecialTokens) -> Result<Self> {
        let raw: Vec<Vec<T>> = (0..k)
            .map(|i| {
                let theta = std::f64::consts::TAU * i as f64 / k as f64;
                vec![T::lit(theta.cos()), T::lit(theta.sin())]
            })
            .collect();
        Self::new(&raw, special)
    }

    /// The standard basis of `R^K`; every pair is at distance `sqrt(2)`.
    pub fn one_hot(k: usize, special: SpecialTokens) -> Result<Self> {
        let raw: Vec<Vec<T>> = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| if i == j { T::one() } else { T::zero() })
                    .collect()
            })
            .collect();
        Self::new(&raw, special)
    }

    /// Returns a space with one extra token appended and designated as the
    /// mask. Existing embeddings gain a zero coordinate and the mask is the
    /// new basis direction, so distances between old tokens are unchanged.
    pub fn with_mask_token(&self) -> Result<Self> {
        let k = self.k();
        let mut raw: Vec<Vec<T>> = (0..k)
            .map(|i| {
                let mut v = self.embedding(i).to_vec();
                v.push(T::zero());
                v
            })
            .collect();
        let mut mask = vec![T::zero(); self.dim + 1];
        mask[self.dim] = T::one();
        raw.push(mask);
        let special = SpecialTokens {
            mask: Some(k),
            ..self.special
        };
        Self::new(&raw, special)
    }

    pub fn k(&self) -> usize {
        self.distances.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn special(&self) -> SpecialTokens {
        self.special
    }

    pub fn embedding(&self, token: usize) -> &[T] {
        &self.embeddings[token * self.dim..(token + 1) * self.dim]
    }

    pub fn distances(&self) -> &DistanceTable<T> {
        &self.distances
    }

    pub fn shared_distances(&self) -> Arc<DistanceTable<T>> {
        Arc::clone(&self.distances)
    }

    pub fn distance(&self, a: usize, b: usize) -> Result<T> {
        check_index(a, self.k())?;
        check_index(b, self.k())?;
        Ok(self.distances.get(a, b))
    }

    /// Serializes the (normalized) embeddings in the `dfm-emb v1` format.
    pub fn to_embedding_text(&self) -> String {
        let mut out = format!(
            "{EMBEDDING_HEADER} {EMBEDDING_VERSION} {} {}\n",
            self.k(),
            self.dim
        );
        for i in 0..self.k() {
            let row: Vec<String> = self.embedding(i).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }
}

/// Parses a `dfm-emb v1 K E` embedding file into raw (unnormalized) rows.
pub fn parse_embeddings<T: Scalar, R: BufRead>(reader: R) -> Result<Vec<Vec<T>>> {
    let mut lines = reader.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(l) if l.trim().is_empty() => None,
        other => Some((i + 1, other)),
    });
    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty embedding file".into(),
    })?;
    let header = header?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != EMBEDDING_HEADER {
        return Err(Error::Parse {
            line: hline,
            msg: format!("expected `{EMBEDDING_HEADER} v1 K E`, got `{header}`"),
        });
    }
    if fields[1] != EMBEDDING_VERSION {
        return Err(Error::Parse {
            line: hline,
            msg: format!("unsupported version `{}`", fields[1]),
        });
    }
    let parse_dim = |s: &str| {
        s.parse::<usize>().map_err(|e| Error::Parse {
            line: hline,
            msg: format!("bad dimension `{s}`: {e}"),
        })
    };
    let k = parse_dim(fields[2])?;
    let e = parse_dim(fields[3])?;

    let mut rows = Vec::with_capacity(k);
    for (lineno, line) in lines {
        let line = line?;
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map(T::lit).map_err(|err| Error::Parse {
                    line: lineno,
                    msg: format!("bad float `{tok}`: {err}"),
                })
            })
            .collect::<Result<Vec<T>>>()?;
        if row.len() != e {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {e} values, got {}", row.len()),
            });
        }
        rows.push(row);
    }
    if rows.len() != k {
        return Err(Error::Parse {
            line: hline,
            msg: format!("header declares {k} rows, found {}", rows.len()),
        });
    }
    Ok(rows)
}

pub fn load_embeddings<T: Scalar>(path: &Path, special: SpecialTokens) -> Result<TokenSpace<T>> {
    let file = std::fs::File::open(path)?;
    let rows = parse_embeddings::<T, _>(std::io::BufReader::new(file))?;
    TokenSpace::new(&rows, special)
}
