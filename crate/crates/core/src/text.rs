//! Toy sentence encoder: hashed bag of words.
//!
//! Each token maps to a fixed pseudo-random vector with unit-variance
//! entries, keyed by `(token, table_seed)`. A sentence embedding is the sum of
//! its token vectors divided by `sqrt(max(1, n_tokens))`. Question and answer
//! are encoded separately by the same encoder and concatenated, question
//! first.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Parameters};
use crate::seed::{fnv1a64, rng_for};
use crate::tensor::{ops, Tensor};

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn token_vector(token: &str, table_seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = rng_for(table_seed, token);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Fixed-length sentence vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
}

/// `[question embedding | answer embedding]`, length `2E`.
#[derive(Debug, Clone, PartialEq)]
pub struct QaEmbedding {
    pub vector: Vec<f64>,
}

impl QaEmbedding {
    pub fn question(&self) -> &[f64] {
        &self.vector[..self.vector.len() / 2]
    }

    pub fn answer(&self) -> &[f64] {
        &self.vector[self.vector.len() / 2..]
    }
}

pub fn embed_sentence<S: AsRef<str>>(tokens: &[S], table_seed: u64, dim: usize) -> SentenceEmbedding {
    let mut vector = vec![0.0; dim];
    for t in tokens {
        for (v, x) in vector.iter_mut().zip(token_vector(t.as_ref(), table_seed, dim)) {
            *v += x;
        }
    }
    let norm = (tokens.len().max(1) as f64).sqrt();
    vector.iter_mut().for_each(|v| *v /= norm);
    SentenceEmbedding { vector }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    /// Sentence embedding width `E`.
    pub embed_size: usize,
    pub table_seed: u64,
    /// Train a hashed embedding table instead of using fixed token vectors.
    pub learnable: bool,
    /// Table rows for the learnable variant; tokens hash into these buckets.
    pub vocab_buckets: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            embed_size: 32,
            table_seed: 7,
            learnable: false,
            vocab_buckets: 256,
        }
    }
}

pub fn make_qa_embedding(question: &str, answer: &str, cfg: &TextConfig) -> QaEmbedding {
    let q = embed_sentence(&tokenize(question), cfg.table_seed, cfg.embed_size);
    let a = embed_sentence(&tokenize(answer), cfg.table_seed, cfg.embed_size);
    let mut vector = q.vector;
    vector.extend(a.vector);
    QaEmbedding { vector }
}

/// Encodes batches of question/answer pairs into `[B × 2E]`.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub cfg: TextConfig,
    /// `[vocab_buckets × E]`, present only for the learnable variant.
    pub table: Option<Tensor>,
}

impl TextEncoder {
    pub fn new(cfg: TextConfig) -> Result<Self> {
        if cfg.embed_size == 0 {
            return Err(Error::Config("embed_size must be positive".into()));
        }
        let table = if cfg.learnable {
            if cfg.vocab_buckets == 0 {
                return Err(Error::Config("vocab_buckets must be positive".into()));
            }
            let mut rng = rng_for(cfg.table_seed, "text.table");
            let data = (0..cfg.vocab_buckets * cfg.embed_size)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            Some(Tensor::parameter(data, &[cfg.vocab_buckets, cfg.embed_size])?)
        } else {
            None
        };
        Ok(TextEncoder { cfg, table })
    }

    pub fn width(&self) -> usize {
        2 * self.cfg.embed_size
    }

    pub fn encode(&self, pairs: &[(&str, &str)]) -> Result<Tensor> {
        match &self.table {
            None => {
                let mut data = Vec::with_capacity(pairs.len() * self.width());
                for (q, a) in pairs {
                    data.extend(make_qa_embedding(q, a, &self.cfg).vector);
                }
                Tensor::new(data, &[pairs.len(), self.width()])
            }
            Some(table) => {
                let q = self.bag(pairs.iter().map(|p| p.0), table)?;
                let a = self.bag(pairs.iter().map(|p| p.1), table)?;
                ops::concat_cols(&q, &a)
            }
        }
    }

    fn bag<'a>(&self, sentences: impl Iterator<Item = &'a str>, table: &Tensor) -> Result<Tensor> {
        let v = self.cfg.vocab_buckets;
        let mut counts = Vec::new();
        let mut rows = 0;
        for s in sentences {
            let tokens = tokenize(s);
            let w = 1.0 / (tokens.len().max(1) as f64).sqrt();
            let mut row = vec![0.0; v];
            for t in &tokens {
                row[(fnv1a64(t.as_bytes()) % v as u64) as usize] += w;
            }
            counts.extend(row);
            rows += 1;
        }
        ops::matmul(&Tensor::new(counts, &[rows, v])?, table)
    }
}

impl Parameters for TextEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        if let Some(t) = &self.table {
            f(join(prefix, "table"), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(t) = &mut self.table {
            f(join(prefix, "table"), t);
        }
    }
}
