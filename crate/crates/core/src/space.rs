//! Joint embedding-space configuration: widths, similarity and temperature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Similarity function used to compare visual and text embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Cosine,
    Dot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpace {
    /// Width of a single token embedding.
    pub d_token: usize,
    /// Width of the joint visual/text space.
    pub d_embed: usize,
    pub similarity: Similarity,
    /// Softmax temperature; logits are `similarity / temperature`.
    pub temperature: f64,
    /// Longest token sequence the text encoder accepts.
    pub max_seq_len: usize,
}

impl EmbeddingSpace {
    pub fn new(
        d_token: usize,
        d_embed: usize,
        similarity: Similarity,
        temperature: f64,
        max_seq_len: usize,
    ) -> Result<Self> {
        let space = Self {
            d_token,
            d_embed,
            similarity,
            temperature,
            max_seq_len,
        };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if self.d_token == 0 || self.d_embed == 0 {
            return Err(Error::config("d_token and d_embed must be >= 1"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len must be >= 2"));
        }
        Ok(())
    }

    /// Checks that a text input of `len` tokens fits the encoder.
    pub fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 || len > self.max_seq_len {
            return Err(Error::SequenceLength {
                len,
                max: self.max_seq_len,
                context: None,
            });
        }
        Ok(())
    }
}
