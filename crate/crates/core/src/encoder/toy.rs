//! Hashed character n-gram encoder with a single trainable linear map.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, AdamWState};

pub const DEFAULT_BUCKETS: usize = 4096;
pub const NGRAM_SIZES: [usize; 2] = [2, 3];
const BOUNDARY_START: char = '\u{2}';
const BOUNDARY_END: char = '\u{3}';

/// Sparse bucket counts, sorted by bucket with no duplicates.
pub type Features = Vec<(usize, f64)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub dim: usize,
    pub buckets: usize,
    pub seed: u64,
}

/// Character n-grams (n = 2, 3) of the surface wrapped in boundary markers.
pub fn char_ngrams(surface: &str) -> Vec<String> {
    let chars: Vec<char> = std::iter::once(BOUNDARY_START)
        .chain(surface.chars())
        .chain(std::iter::once(BOUNDARY_END))
        .collect();
    let mut grams = Vec::new();
    for n in NGRAM_SIZES {
        if chars.len() < n {
            continue;
        }
        for window in chars.windows(n) {
            grams.push(window.iter().collect());
        }
    }
    grams
}

pub fn bucket_of(gram: &str, buckets: usize) -> usize {
    let mut hasher = FnvHasher::default();
    hasher.write(gram.as_bytes());
    (hasher.finish() % buckets as u64) as usize
}

pub fn featurize(surface: &str, buckets: usize) -> Features {
    let mut hits: Vec<usize> = char_ngrams(surface)
        .iter()
        .map(|g| bucket_of(g, buckets))
        .collect();
    hits.sort_unstable();
    let mut features: Features = Vec::new();
    for bucket in hits {
        match features.last_mut() {
            Some((b, count)) if *b == bucket => *count += 1.0,
            _ => features.push((bucket, 1.0)),
        }
    }
    features
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    config: ToyConfig,
    /// Row-major `buckets x dim`.
    weights: Vec<f64>,
    grad: Vec<f64>,
    optimizer: AdamWState,
}

impl ToyEncoder {
    pub fn new(config: ToyConfig) -> Result<Self> {
        if config.dim < 2 {
            return Err(Error::Argument(format!(
                "toy encoder dim must be >= 2, got {}",
                config.dim
            )));
        }
        if config.buckets == 0 {
            return Err(Error::Argument(
                "toy encoder needs at least one bucket".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 1.0 / (config.dim as f64).sqrt())
            .map_err(|e| Error::Argument(e.to_string()))?;
        let weights = (0..config.buckets * config.dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Ok(Self::from_weights(config, weights))
    }

    pub fn from_weights(config: ToyConfig, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), config.buckets * config.dim);
        let len = weights.len();
        Self {
            config,
            weights,
            grad: vec![0.0; len],
            optimizer: AdamWState::new(len),
        }
    }

    pub fn config(&self) -> ToyConfig {
        self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn optimizer_state(&self) -> &AdamWState {
        &self.optimizer
    }

    pub fn set_optimizer_state(&mut self, state: AdamWState) {
        self.optimizer = state;
    }

    pub fn features(&self, surface: &str) -> Features {
        featurize(surface, self.config.buckets)
    }

    pub fn embed_features(&self, features: &Features) -> Vec<f64> {
        let dim = self.config.dim;
        let mut out = vec![0.0; dim];
        for &(bucket, count) in features {
            let row = &self.weights[bucket * dim..(bucket + 1) * dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += count * w;
            }
        }
        out
    }

    pub fn embed(&self, surface: &str) -> Vec<f64> {
        self.embed_features(&self.features(surface))
    }

    /// Accumulates `d(loss)/d(weights)` given `d(loss)/d(embedding)` for one row.
    pub fn accumulate(&mut self, features: &Features, upstream: &[f64]) {
        let dim = self.config.dim;
        for &(bucket, count) in features {
            let row = &mut self.grad[bucket * dim..(bucket + 1) * dim];
            for (g, u) in row.iter_mut().zip(upstream) {
                *g += count * u;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn step(&mut self, config: &AdamWConfig) {
        self.optimizer.step(config, &mut self.weights, &self.grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ngrams_include_boundaries() {
        let grams = char_ngrams("ab");
        // 2-grams: ^a ab b$ ; 3-grams: ^ab ab$
        assert_eq!(grams.len(), 5);
        assert!(grams.contains(&"ab".to_string()));
    }

    #[test]
    fn identical_surfaces_identical_features() {
        assert_eq!(featurize("ab", 97), featurize("ab", 97));
    }

    #[test]
    fn repeated_grams_are_counted() {
        let features = featurize("aaaa", 1 << 20);
        let total: f64 = features.iter().map(|(_, c)| c).sum();
        assert_eq!(total as usize, char_ngrams("aaaa").len());
        assert!(features.iter().any(|&(_, c)| c > 1.0));
    }

    #[test]
    fn dim_below_two_rejected() {
        let err = ToyEncoder::new(ToyConfig {
            dim: 1,
            buckets: 8,
            seed: 0,
        })
        .unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }
}
