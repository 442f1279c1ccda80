//! Selection of a built-in toy encoder from configuration.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::{FrozenDualEncoder, LinearEncoder, LinearEncoderConfig, Media, ToyTransformerConfig, ToyTransformerEncoder};
use crate::error::Result;
use crate::space::EmbeddingSpace;
use crate::tokens::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    ToyTransformer(ToyTransformerConfig),
    Linear(LinearEncoderConfig),
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::ToyTransformer(ToyTransformerConfig::default())
    }
}

impl EncoderSpec {
    pub fn build(&self) -> Result<BuiltinEncoder> {
        Ok(match self {
            EncoderSpec::ToyTransformer(c) => BuiltinEncoder::Transformer(ToyTransformerEncoder::new(c.clone())?),
            EncoderSpec::Linear(c) => BuiltinEncoder::Linear(LinearEncoder::new(c.clone())?),
        })
    }
}

#[derive(Debug, Clone)]
pub enum BuiltinEncoder {
    Transformer(ToyTransformerEncoder),
    Linear(LinearEncoder),
}

impl BuiltinEncoder {
    fn inner(&self) -> &dyn FrozenDualEncoder {
        match self {
            BuiltinEncoder::Transformer(e) => e,
            BuiltinEncoder::Linear(e) => e,
        }
    }

    /// A frame whose visual embedding is exactly `target`.
    pub fn frame_for_embedding(&self, target: ArrayView1<'_, f64>) -> Array1<f64> {
        match self {
            BuiltinEncoder::Transformer(e) => e.frame_for_embedding(target),
            BuiltinEncoder::Linear(e) => e.frame_for_embedding(target),
        }
    }
}

impl FrozenDualEncoder for BuiltinEncoder {
    fn space(&self) -> &EmbeddingSpace {
        self.inner().space()
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        self.inner().tokenize(text)
    }

    fn encode_text(&self, tokens: &TokenSequence) -> Result<Array1<f64>> {
        self.inner().encode_text(tokens)
    }

    fn text_input_gradient(&self, tokens: &TokenSequence, cotangent: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
        self.inner().text_input_gradient(tokens, cotangent)
    }

    fn encode_visual(&self, media: &Media) -> Result<Array1<f64>> {
        self.inner().encode_visual(media)
    }

    fn frames_per_video(&self) -> usize {
        self.inner().frames_per_video()
    }

    fn weight_digest(&self) -> String {
        self.inner().weight_digest()
    }
}
