//! Affine dual encoder.
//!
//! The text tower is `E^t(t) = W · pad(t) + b`, where `pad` zero-pads the token
//! sequence to `max_seq_len` rows and flattens it row-major. With dot-product
//! similarity the logits are affine in any additive input offset, which makes
//! the regularized tuning objective strictly convex.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::{
    check_cotangent, check_text_input, digest_weights, f32_round, FrozenDualEncoder, Media,
    ToyTokenizer,
};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::space::{EmbeddingSpace, Similarity};
use crate::tokens::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearEncoderConfig {
    pub seed: u64,
    pub d_token: usize,
    pub d_embed: usize,
    pub max_seq_len: usize,
    pub similarity: Similarity,
    pub temperature: f64,
    pub frames_per_video: usize,
}

impl Default for LinearEncoderConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d_token: 8,
            d_embed: 8,
            max_seq_len: 8,
            similarity: Similarity::Dot,
            temperature: 1.0,
            frames_per_video: super::DEFAULT_FRAMES_PER_VIDEO,
        }
    }
}

/// A fixed signed permutation used as the toy visual tower. It is exactly
/// invertible, which lets the toy data generator place videos at chosen
/// points of the joint space.
#[derive(Debug, Clone)]
pub(crate) struct SignedPermutation {
    perm: Vec<usize>,
    sign: Vec<f64>,
}

impl SignedPermutation {
    pub(crate) fn random(dim: usize, rng: &mut SeededRng) -> Self {
        let mut perm: Vec<usize> = (0..dim).collect();
        rng.shuffle(&mut perm);
        let sign = (0..dim)
            .map(|_| if rng.below(2) == 0 { 1.0 } else { -1.0 })
            .collect();
        Self { perm, sign }
    }

    /// `out[i] = sign[i] · x[perm[i]]`
    pub(crate) fn apply(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if x.len() != self.perm.len() {
            return Err(Error::dim(format!(
                "frame width {} does not match visual width {}",
                x.len(),
                self.perm.len()
            )));
        }
        Ok(Array1::from_shape_fn(self.perm.len(), |i| {
            self.sign[i] * x[self.perm[i]]
        }))
    }

    pub(crate) fn invert(&self, y: ArrayView1<'_, f64>) -> Array1<f64> {
        let mut x = Array1::zeros(self.perm.len());
        for i in 0..self.perm.len() {
            x[self.perm[i]] = self.sign[i] * y[i];
        }
        x
    }

    pub(crate) fn digest_block(&self) -> Vec<f64> {
        self.perm
            .iter()
            .map(|&p| p as f64)
            .chain(self.sign.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LinearEncoder {
    config: LinearEncoderConfig,
    space: EmbeddingSpace,
    tokenizer: ToyTokenizer,
    /// `d_embed × (max_seq_len · d_token)`
    text_weight: Array2<f64>,
    text_bias: Array1<f64>,
    visual: SignedPermutation,
}

impl LinearEncoder {
    pub fn new(config: LinearEncoderConfig) -> Result<Self> {
        let space = EmbeddingSpace::new(
            config.d_token,
            config.d_embed,
            config.similarity,
            config.temperature,
            config.max_seq_len,
        )?;
        if config.frames_per_video == 0 {
            return Err(Error::config("frames_per_video must be >= 1"));
        }
        let root = SeededRng::new(config.seed);
        let width = config.max_seq_len * config.d_token;
        let std = 1.0 / (width as f64).sqrt();
        let mut rng = root.fork("linear-text-weight");
        let text_weight = Array2::from_shape_simple_fn((config.d_embed, width), || {
            f32_round(rng.normal(0.0, std))
        });
        let mut rng = root.fork("linear-text-bias");
        let text_bias =
            Array1::from_shape_simple_fn(config.d_embed, || f32_round(rng.normal(0.0, 0.1)));
        let visual = SignedPermutation::random(config.d_embed, &mut root.fork("linear-visual"));
        let tokenizer = ToyTokenizer::new(root.fork("tokenizer").seed(), config.d_token);
        Ok(Self {
            config,
            space,
            tokenizer,
            text_weight,
            text_bias,
            visual,
        })
    }

    pub fn config(&self) -> &LinearEncoderConfig {
        &self.config
    }

    pub fn text_weight(&self) -> &Array2<f64> {
        &self.text_weight
    }

    pub fn text_bias(&self) -> &Array1<f64> {
        &self.text_bias
    }

    /// Frame whose visual embedding is exactly `target`.
    pub fn frame_for_embedding(&self, target: ArrayView1<'_, f64>) -> Array1<f64> {
        self.visual.invert(target)
    }
}

impl FrozenDualEncoder for LinearEncoder {
    fn space(&self) -> &EmbeddingSpace {
        &self.space
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        Ok(self.tokenizer.tokenize(text))
    }

    fn encode_text(&self, tokens: &TokenSequence) -> Result<Array1<f64>> {
        check_text_input(&self.space, tokens)?;
        let d = self.space.d_token;
        let rows = tokens.rows();
        let mut out = self.text_bias.clone();
        for k in 0..self.space.d_embed {
            let w = self.text_weight.row(k);
            let mut acc = 0.0;
            for p in 0..rows.nrows() {
                for j in 0..d {
                    acc += w[p * d + j] * rows[[p, j]];
                }
            }
            out[k] += acc;
        }
        Ok(out)
    }

    fn text_input_gradient(
        &self,
        tokens: &TokenSequence,
        cotangent: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        check_text_input(&self.space, tokens)?;
        check_cotangent(&self.space, cotangent)?;
        let d = self.space.d_token;
        let l = tokens.len();
        let grad_flat = self.text_weight.t().dot(&cotangent);
        Ok(Array2::from_shape_fn((l, d), |(p, j)| grad_flat[p * d + j]))
    }

    fn encode_visual(&self, media: &Media) -> Result<Array1<f64>> {
        match media {
            Media::Pixels(frame) => self.visual.apply(frame.view()),
            Media::CacheKey(_) => Err(Error::Unsupported(
                "linear encoder cannot resolve cache keys".into(),
            )),
        }
    }

    fn frames_per_video(&self) -> usize {
        self.config.frames_per_video
    }

    fn weight_digest(&self) -> String {
        let visual = self.visual.digest_block();
        digest_weights([
            self.text_weight.as_slice().expect("standard layout"),
            self.text_bias.as_slice().expect("standard layout"),
            visual.as_slice(),
            self.tokenizer.table().as_slice().expect("standard layout"),
        ])
    }
}
