//! Feature-hashed sign embedding of caption text.
//!
//! Word n-grams are hashed twice with seeded 64-bit hashes: one picks the
//! coordinate, the other the sign. Counts are accumulated as integers and
//! L2-normalized at the end, so the result does not depend on summation order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub ngram_orders: Vec<usize>,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            dim: 256,
            ngram_orders: vec![1, 2],
            seed: 0x7e47_f00d,
        }
    }
}

impl EmbeddingConfig {
    pub fn with_dim(dim: usize) -> Self {
        EmbeddingConfig {
            dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(Error::contract(format!("embedding dim {} is below 8", self.dim)));
        }
        if self.ngram_orders.is_empty() || self.ngram_orders.contains(&0) {
            return Err(Error::contract("n-gram orders must be a non-empty set of positive integers"));
        }
        Ok(())
    }
}

/// Unit-norm vector, or all zeros for text with no words.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub values: Vec<f64>,
}

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &TextEmbedding) -> f64 {
        let (a, b) = (self.norm(), other.norm());
        if a == 0.0 || b == 0.0 {
            return 0.0;
        }
        self.values.iter().zip(&other.values).map(|(x, y)| x * y).sum::<f64>() / (a * b)
    }

    pub fn to_scalar<S: Scalar>(&self) -> Vec<S> {
        self.values.iter().map(|&v| S::lit(v)).collect()
    }

    /// Raw little-endian `f32` values.
    pub fn to_f32_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Signed integer counts before normalization.
pub fn hashed_counts(text: &str, config: &EmbeddingConfig) -> Vec<i64> {
    let tokens = tokenize(text);
    let mut counts = vec![0i64; config.dim];
    let index_seed = splitmix64(config.seed);
    let sign_seed = splitmix64(config.seed ^ 0x5157_4e5f_5345_4544);
    for &n in &config.ngram_orders {
        for gram in tokens.windows(n) {
            let key = gram.join("\u{1f}");
            // the order is mixed in so a bigram never aliases a unigram by construction
            let mut bytes = vec![n as u8];
            bytes.extend_from_slice(key.as_bytes());
            let idx = splitmix64(fnv1a(index_seed, &bytes)) % config.dim as u64;
            let sign = if splitmix64(fnv1a(sign_seed, &bytes)) & 1 == 0 { 1 } else { -1 };
            counts[idx as usize] += sign;
        }
    }
    counts
}

pub fn embed_caption(text: &str, config: &EmbeddingConfig) -> TextEmbedding {
    let counts = hashed_counts(text, config);
    let sq: i64 = counts.iter().map(|c| c * c).sum();
    if sq == 0 {
        return TextEmbedding {
            values: vec![0.0; config.dim],
        };
    }
    let norm = (sq as f64).sqrt();
    TextEmbedding {
        values: counts.iter().map(|&c| c as f64 / norm).collect(),
    }
}
