//! Frozen dual encoders.
//!
//! [`FrozenDualEncoder`] is the only view the tuning code has of a
//! vision-language model: a text tower over token embeddings, a visual tower,
//! and a vector-Jacobian product at the text input. Weights never change after
//! construction.
//!
//! Built-in implementations:
//! - [`ToyTransformerEncoder`]: small pre-LN transformer, non-convex.
//! - [`LinearEncoder`]: affine text tower, makes the tuning objective convex.
//! - [`FeatureCacheEncoder`]: visual lookups from a precomputed feature file.

mod builtin;
mod cache;
mod linear;
mod tokenizer;
mod transformer;

use ndarray::{Array1, Array2, ArrayView1};

pub use builtin::{BuiltinEncoder, EncoderSpec};
pub use cache::{
    read_feature_cache, write_feature_cache, FeatureCache, FeatureCacheEncoder, CACHE_MAGIC,
    CACHE_VERSION,
};
pub use linear::{LinearEncoder, LinearEncoderConfig};
pub use tokenizer::ToyTokenizer;
pub use transformer::{ToyTransformerConfig, ToyTransformerEncoder};

use crate::error::{Error, Result};
use crate::space::EmbeddingSpace;
use crate::tokens::TokenSequence;

/// Default number of frames averaged per video.
pub const DEFAULT_FRAMES_PER_VIDEO: usize = 10;

/// Input to the visual tower.
#[derive(Debug, Clone, PartialEq)]
pub enum Media {
    /// A raw frame for the toy visual towers.
    Pixels(Array1<f64>),
    /// A key into a precomputed feature cache.
    CacheKey(String),
}

pub trait FrozenDualEncoder: Send + Sync {
    fn space(&self) -> &EmbeddingSpace;

    fn tokenize(&self, text: &str) -> Result<TokenSequence>;

    /// Raw (unnormalized) text embedding of a token sequence.
    fn encode_text(&self, tokens: &TokenSequence) -> Result<Array1<f64>>;

    /// `∂⟨cotangent, encode_text(tokens)⟩ / ∂tokens`, an `l × d_token` matrix.
    fn text_input_gradient(
        &self,
        tokens: &TokenSequence,
        cotangent: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>>;

    fn encode_visual(&self, media: &Media) -> Result<Array1<f64>>;

    fn frames_per_video(&self) -> usize {
        DEFAULT_FRAMES_PER_VIDEO
    }

    /// Hex SHA-256 over every weight, for frozen-ness checks.
    fn weight_digest(&self) -> String;
}

/// Checks the preconditions shared by `encode_text` and `text_input_gradient`.
pub(crate) fn check_text_input(space: &EmbeddingSpace, tokens: &TokenSequence) -> Result<()> {
    space.check_len(tokens.len())?;
    if tokens.d_token() != space.d_token {
        return Err(Error::dim(format!(
            "token width {} does not match encoder width {}",
            tokens.d_token(),
            space.d_token
        )));
    }
    Ok(())
}

pub(crate) fn check_cotangent(space: &EmbeddingSpace, cotangent: ArrayView1<'_, f64>) -> Result<()> {
    if cotangent.len() != space.d_embed {
        return Err(Error::dim(format!(
            "cotangent width {} does not match d_embed {}",
            cotangent.len(),
            space.d_embed
        )));
    }
    Ok(())
}

/// Mean of the per-frame visual embeddings. No normalization is applied;
/// cosine classifiers normalize the mean.
pub fn encode_video(enc: &dyn FrozenDualEncoder, frames: &[Media]) -> Result<Array1<f64>> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("video has no frames".into()));
    }
    let mut sum = Array1::<f64>::zeros(enc.space().d_embed);
    for frame in frames {
        let e = enc.encode_visual(frame)?;
        if e.len() != sum.len() {
            return Err(Error::dim("frame embedding width mismatch"));
        }
        sum += &e;
    }
    Ok(sum / frames.len() as f64)
}

/// `k` frame indices spread over `total` frames: `floor((i + 0.5) · total / k)`.
///
/// When `k > total` indices repeat.
pub fn uniform_frame_indices(total: usize, k: usize) -> Vec<usize> {
    assert!(total >= 1 && k >= 1, "total and k must be >= 1");
    (0..k)
        .map(|i| {
            // integer form of floor((i + 0.5) * total / k)
            let idx = ((2 * i + 1) * total) / (2 * k);
            idx.min(total - 1)
        })
        .collect()
}

/// Hex SHA-256 of a list of weight blocks.
pub(crate) fn digest_weights<'a>(blocks: impl IntoIterator<Item = &'a [f64]>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for block in blocks {
        h.update((block.len() as u64).to_le_bytes());
        for v in block {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Rounds to the nearest `f32`; weights and token tables are stored this way so
/// they survive 32-bit serialization unchanged.
pub(crate) fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_indices_closed_form() {
        assert_eq!(uniform_frame_indices(10, 10), (0..10).collect::<Vec<_>>());
        assert_eq!(uniform_frame_indices(1, 10), vec![0; 10]);
        assert_eq!(
            uniform_frame_indices(100, 10),
            vec![5, 15, 25, 35, 45, 55, 65, 75, 85, 95]
        );
        assert_eq!(uniform_frame_indices(32, 1), vec![16]);
    }

    #[test]
    fn frame_indices_non_decreasing_and_in_range() {
        for total in 1..40 {
            for k in 1..40 {
                let idx = uniform_frame_indices(total, k);
                assert_eq!(idx.len(), k);
                assert!(idx.windows(2).all(|w| w[0] <= w[1]));
                assert!(idx.iter().all(|&i| i < total));
                // matches the real-valued rule
                for (i, &v) in idx.iter().enumerate() {
                    let real = ((i as f64 + 0.5) * total as f64 / k as f64).floor() as usize;
                    assert_eq!(v, real.min(total - 1));
                }
            }
        }
    }
}
