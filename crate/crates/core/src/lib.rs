//! Few-shot text-input tuning for frozen dual-encoder vision-language models.
//!
//! Four methods tune only what is fed to the frozen text tower:
//! name tuning (additive offsets on class-name token embeddings, L2-penalized),
//! CoOp (a shared learnable context), CoOp-CSC (one context per class) and
//! CoNa (shared context plus name offsets). Everything else here, from the
//! encoder abstraction to episodic evaluation, exists to train and measure
//! those parameters reproducibly.

pub mod baselines;
pub mod checkpoint;
pub mod classify;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod io;
pub mod lbfgs;
pub mod protocol;
pub mod rng;
pub mod space;
pub mod textparams;
pub mod tokens;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
