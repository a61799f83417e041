//! Hashed-vocabulary token features: every token string maps to a bucket of
//! a trainable embedding table, no vocabulary fitting required.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use twox_hash::XxHash64;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HasherConfig {
    pub hash_buckets: usize,
    pub hash_seed: u64,
    pub embed_dim: usize,
    /// Tokens beyond this count are dropped from a sentence.
    pub max_tokens: usize,
}

impl Default for HasherConfig {
    fn default() -> Self {
        Self {
            hash_buckets: 65536,
            hash_seed: 0,
            embed_dim: 64,
            max_tokens: 128,
        }
    }
}

impl HasherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hash_buckets < 2 {
            return Err(Error::Config(format!("hash_buckets must be >= 2, got {}", self.hash_buckets)));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config(format!("embed_dim must be >= 2, got {}", self.embed_dim)));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

pub fn token_id(token: &str, cfg: &HasherConfig) -> usize {
    (XxHash64::oneshot(cfg.hash_seed, token.as_bytes()) % cfg.hash_buckets as u64) as usize
}

/// Bucket ids for a sentence, truncated to `max_tokens`.
pub fn token_ids<T: AsRef<str>>(tokens: &[T], cfg: &HasherConfig) -> Vec<usize> {
    tokens
        .iter()
        .take(cfg.max_tokens)
        .map(|t| token_id(t.as_ref(), cfg))
        .collect()
}

/// Gaussian table of shape `(hash_buckets, embed_dim)`, std `1/sqrt(embed_dim)`.
pub fn init_embedding_table<S: Scalar>(cfg: &HasherConfig, seed: u64) -> Result<Tensor<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (cfg.embed_dim as f64).sqrt()).expect("positive std");
    let data = (0..cfg.hash_buckets * cfg.embed_dim)
        .map(|_| S::of(normal.sample(&mut rng)))
        .collect();
    Tensor::new(vec![cfg.hash_buckets, cfg.embed_dim], data)
}

/// Row gather from the bound table; gradients reach the gathered rows only.
pub fn lookup_embeddings<'t, S: Scalar>(table: Var<'t, S>, ids: &[usize]) -> Result<Var<'t, S>> {
    if ids.is_empty() {
        return Err(Error::shape("lookup_embeddings", "no token ids"));
    }
    table.gather_rows(ids)
}
