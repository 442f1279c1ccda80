//! Vocabulary-free tokenizer for the toy encoders.
//!
//! Text is lower-cased and split on whitespace; each token is hashed with the
//! tokenizer seed into a fixed table of embedding rows.

use ndarray::Array2;

use super::f32_round;
use crate::rng::{derive_seed, SeededRng};
use crate::tokens::TokenSequence;

pub const DEFAULT_BUCKETS: usize = 4096;
const TOKEN_STD: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct ToyTokenizer {
    seed: u64,
    table: Array2<f64>,
}

impl ToyTokenizer {
    pub fn new(seed: u64, d_token: usize) -> Self {
        Self::with_buckets(seed, d_token, DEFAULT_BUCKETS)
    }

    pub fn with_buckets(seed: u64, d_token: usize, buckets: usize) -> Self {
        let mut rng = SeededRng::new(seed).fork("token-table");
        let table =
            Array2::from_shape_simple_fn((buckets, d_token), || f32_round(rng.normal(0.0, TOKEN_STD)));
        Self { seed, table }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (derive_seed(self.seed, token) % self.table.nrows() as u64) as usize
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let lowered = text.to_lowercase();
        let ids: Vec<usize> = lowered.split_whitespace().map(|t| self.bucket(t)).collect();
        let rows = Array2::from_shape_fn((ids.len(), self.table.ncols()), |(i, j)| {
            self.table[[ids[i], j]]
        });
        TokenSequence::new(rows, Some(text.to_string()))
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }
}
