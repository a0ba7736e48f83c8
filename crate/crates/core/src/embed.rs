//! Token and sentence representations.
//!
//! Three sources feed the models: a word-vector table looked up per token, a
//! contextual encoder whose vector for a token depends on its neighbours, and
//! a trainable sentence-affect encoder producing one vector per utterance.
//! The two encoders are traits; the implementations here are small,
//! deterministic stand-ins for large pre-trained networks.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{Params, Tensor};
use crate::textprep::Token;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Unit-norm vector derived from `surface` and `seed` only.
pub fn hash_vector(surface: &str, dim: usize, seed: u64) -> Vec<f64> {
    if dim == 0 {
        return Vec::new();
    }
    let key = fnv1a(surface.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Word vectors with a vocabulary index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WordTable {
    words: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    /// `|V| x dim`
    matrix: Vec<f64>,
}

impl WordTable {
    /// A table with no entries; every lookup is out of vocabulary.
    pub fn empty(dim: usize) -> Self {
        WordTable {
            dim,
            ..WordTable::default()
        }
    }

    pub fn from_parts(words: Vec<String>, dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != words.len() * dim {
            return Err(Error::domain(format!(
                "word matrix has {} values for {} words x {dim}",
                matrix.len(),
                words.len()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("word matrix contains non-finite values"));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::domain(format!("duplicate word {w:?}")));
            }
        }
        Ok(WordTable {
            words,
            index,
            dim,
            matrix,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn lookup(&self, word: &str) -> Option<&[f64]> {
        self.index
            .get(word)
            .map(|&i| &self.matrix[i * self.dim..(i + 1) * self.dim])
    }
}

/// Parses whitespace-separated `token v1 .. vd` lines; `d` is set by the
/// first line.
pub fn load_word_vectors(text: &str) -> Result<WordTable> {
    let mut words = Vec::new();
    let mut matrix = Vec::new();
    let mut dim = None;
    let mut seen = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else {
            continue;
        };
        let start = matrix.len();
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::parse(line_no, format!("non-numeric field {f:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse(line_no, format!("non-finite value {f:?}")));
            }
            matrix.push(v);
        }
        let width = matrix.len() - start;
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => return Err(Error::parse(line_no, format!("expected {d} values, found {width}"))),
            _ => {}
        }
        if seen.insert(word.to_string(), line_no).is_some() {
            return Err(Error::parse(line_no, format!("duplicate word {word:?}")));
        }
        words.push(word.to_string());
    }
    WordTable::from_parts(words, dim.unwrap_or(0), matrix)
}

/// Vector for tokens missing from a [`WordTable`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum OovPolicy {
    Zero,
    HashRandom { seed: u64 },
}

pub fn embed_tokens(table: &WordTable, tokens: &[Token], policy: OovPolicy) -> Vec<Vec<f64>> {
    tokens
        .iter()
        .map(|t| match table.lookup(t.surface()) {
            Some(row) => row.to_vec(),
            None => match policy {
                OovPolicy::Zero => vec![0.0; table.dim()],
                OovPolicy::HashRandom { seed } => hash_vector(t.surface(), table.dim(), seed),
            },
        })
        .collect()
}

/// Per-token vectors that may depend on the whole sequence.
pub trait ContextualEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, tokens: &[Token]) -> Vec<Vec<f64>>;
}

/// One vector per utterance, with optionally trainable parameters.
pub trait SentenceAffectEncoder: Params {
    fn dim(&self) -> usize;
    fn encode(&self, tokens: &[Token]) -> Vec<f64>;
    /// Accumulates `dL/dparams` given `dL/doutput`. No-op when frozen.
    fn backward(&mut self, tokens: &[Token], d_out: &[f64]);
    fn trainable(&self) -> bool;
}

/// Window mix of token hash vectors: weights 0.5 for the token and 0.25 for
/// each neighbour, renormalized over the neighbours that exist.
pub fn toy_contextual(tokens: &[Token], dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let base: Vec<Vec<f64>> = tokens.iter().map(|t| hash_vector(t.surface(), dim, seed)).collect();
    (0..base.len())
        .map(|i| {
            let mut parts = vec![(0.5, &base[i])];
            if i > 0 {
                parts.push((0.25, &base[i - 1]));
            }
            if i + 1 < base.len() {
                parts.push((0.25, &base[i + 1]));
            }
            let total: f64 = parts.iter().map(|p| p.0).sum();
            let mut v = vec![0.0; dim];
            for (w, b) in parts {
                for (o, x) in v.iter_mut().zip(b) {
                    *o += w / total * x;
                }
            }
            v
        })
        .collect()
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyContextual {
    pub dim: usize,
    pub seed: u64,
}

impl ContextualEncoder for ToyContextual {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, tokens: &[Token]) -> Vec<Vec<f64>> {
        toy_contextual(tokens, self.dim, self.seed)
    }
}

/// Trainable embedding bag: the mean of one parameter row per token.
/// Vocabulary words own a row each; other tokens share `buckets` hashed rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyAffect {
    words: Vec<String>,
    index: HashMap<String, usize>,
    buckets: usize,
    dim: usize,
    trainable: bool,
    /// `(|V| + buckets) x dim`
    pub table: Tensor,
}

impl ToyAffect {
    pub fn new(words: Vec<String>, buckets: usize, dim: usize, trainable: bool, rng: &mut impl Rng) -> Result<Self> {
        let rows = words.len() + buckets;
        if rows == 0 {
            return Err(Error::domain("affect encoder needs at least one row"));
        }
        let table = Tensor::uniform(&[rows, dim], 0.5, rng);
        Self::from_parts(words, buckets, trainable, table)
    }

    pub fn from_parts(words: Vec<String>, buckets: usize, trainable: bool, table: Tensor) -> Result<Self> {
        let rows = words.len() + buckets;
        let dim = match table.shape() {
            &[r, d] if r == rows && rows > 0 => d,
            s => {
                return Err(Error::domain(format!(
                    "affect table shape {s:?} does not fit {} words + {buckets} buckets",
                    words.len()
                )))
            }
        };
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::domain(format!("duplicate affect word {w:?}")));
            }
        }
        Ok(ToyAffect {
            words,
            index,
            buckets,
            dim,
            trainable,
            table,
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn row(&self, token: &Token) -> usize {
        match self.index.get(token.surface()) {
            Some(&i) => i,
            None if self.buckets > 0 => {
                self.words.len() + (fnv1a(token.surface().as_bytes()) % self.buckets as u64) as usize
            }
            // a vocabulary-only table sends unknown tokens to the first row
            None => 0,
        }
    }
}

/// Affect vector of `tokens`; the empty list maps to the zero vector.
pub fn toy_affect(tokens: &[Token], encoder: &ToyAffect) -> Vec<f64> {
    encoder.encode(tokens)
}

impl SentenceAffectEncoder for ToyAffect {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, tokens: &[Token]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if tokens.is_empty() {
            return out;
        }
        let values = self.table.value();
        for t in tokens {
            let r = self.row(t);
            for (o, v) in out.iter_mut().zip(&values[r * self.dim..(r + 1) * self.dim]) {
                *o += v;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }

    fn backward(&mut self, tokens: &[Token], d_out: &[f64]) {
        if !self.trainable || tokens.is_empty() {
            return;
        }
        let inv = 1.0 / tokens.len() as f64;
        let dim = self.dim;
        let rows: Vec<usize> = tokens.iter().map(|t| self.row(t)).collect();
        let grad = self.table.grad_mut();
        for r in rows {
            for (g, d) in grad[r * dim..(r + 1) * dim].iter_mut().zip(d_out) {
                *g += d * inv;
            }
        }
    }

    fn trainable(&self) -> bool {
        self.trainable
    }
}

impl Params for ToyAffect {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if self.trainable {
            f(&crate::neural::tensor::join_name(prefix, "table"), &self.table);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if self.trainable {
            f(&crate::neural::tensor::join_name(prefix, "table"), &mut self.table);
        }
    }
}
