//! The regularized cross-entropy objective and its exact gradient.
//!
//! `J = −Σ_{(x,y)} log p(y | x) + α · ½ Σ_i ‖ε_i‖²`, with `p` the softmax over
//! similarities between `x` and the encoded assembled text of every class.
//! Gradients reach the learnable tensors through the encoder's
//! vector-Jacobian product; encoder weights are never touched.

use ndarray::{s, Array1, Array2};

use crate::classify::{l2_norm, normalized};
use crate::encoder::FrozenDualEncoder;
use crate::error::{Error, Result};
use crate::space::Similarity;
use crate::textparams::{parameter_l2, TextParameterSet};
use crate::tokens::{ClassSet, TokenSequence};

/// A visual embedding with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub embedding: Array1<f64>,
    pub label: usize,
}

impl Example {
    pub fn new(embedding: Array1<f64>, label: usize) -> Self {
        Self { embedding, label }
    }
}

/// Gradients aligned with [`TextParameterSet::learnable`].
pub type Gradients = Vec<Array2<f64>>;

fn check_batch(batch: &[Example], n_classes: usize, d_embed: usize) -> Result<()> {
    for (i, ex) in batch.iter().enumerate() {
        if ex.label >= n_classes {
            return Err(Error::config(format!(
                "batch item {i} has label {} but there are {n_classes} classes",
                ex.label
            )));
        }
        if ex.embedding.len() != d_embed {
            return Err(Error::dim(format!(
                "batch item {i} has width {}, expected {d_embed}",
                ex.embedding.len()
            )));
        }
        if ex.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding of batch item {i}")));
        }
    }
    Ok(())
}

struct Forward {
    sequences: Vec<TokenSequence>,
    text: Vec<Array1<f64>>,
}

fn encode_classes(
    params: &TextParameterSet,
    enc: &dyn FrozenDualEncoder,
    classes: &ClassSet,
) -> Result<Forward> {
    let mut sequences = Vec::with_capacity(classes.len());
    let mut text = Vec::with_capacity(classes.len());
    for class in classes.iter() {
        let seq = params.assemble(class)?;
        text.push(enc.encode_text(&seq)?);
        sequences.push(seq);
    }
    Ok(Forward { sequences, text })
}

fn check_shapes(params: &TextParameterSet, enc: &dyn FrozenDualEncoder, classes: &ClassSet) -> Result<()> {
    if params.num_classes() != classes.len() {
        return Err(Error::config(format!(
            "parameter set covers {} classes, class set has {}",
            params.num_classes(),
            classes.len()
        )));
    }
    if let Some(offsets) = params.offsets() {
        for c in classes.iter() {
            if offsets[c.class_id].dim() != params.effective_name(c).shape() {
                return Err(Error::dim(format!(
                    "offset for class {} has shape {:?}, name has {:?}",
                    c.class_id,
                    offsets[c.class_id].dim(),
                    params.effective_name(c).shape()
                )));
            }
        }
    }
    if classes.entries()[0].name_tokens.d_token() != enc.space().d_token {
        return Err(Error::dim("class tokens do not match encoder width"));
    }
    Ok(())
}

/// Per-example log-softmax over temperature-scaled similarities.
fn log_probs(sims: &[f64], tau: f64) -> Vec<f64> {
    let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.into_iter().map(|l| l - lse).collect()
}

/// Objective value on `batch`.
pub fn loss(
    params: &TextParameterSet,
    batch: &[Example],
    enc: &dyn FrozenDualEncoder,
    classes: &ClassSet,
    alpha: f64,
) -> Result<f64> {
    Ok(loss_and_gradients_impl(params, batch, enc, classes, alpha, false)?.0)
}

/// Exact gradient of [`loss`] with respect to every learnable tensor.
pub fn gradients(
    params: &TextParameterSet,
    batch: &[Example],
    enc: &dyn FrozenDualEncoder,
    classes: &ClassSet,
    alpha: f64,
) -> Result<Gradients> {
    Ok(loss_and_gradients_impl(params, batch, enc, classes, alpha, true)?.1)
}

pub fn loss_and_gradients(
    params: &TextParameterSet,
    batch: &[Example],
    enc: &dyn FrozenDualEncoder,
    classes: &ClassSet,
    alpha: f64,
) -> Result<(f64, Gradients)> {
    loss_and_gradients_impl(params, batch, enc, classes, alpha, true)
}

fn loss_and_gradients_impl(
    params: &TextParameterSet,
    batch: &[Example],
    enc: &dyn FrozenDualEncoder,
    classes: &ClassSet,
    alpha: f64,
    want_grad: bool,
) -> Result<(f64, Gradients)> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    check_shapes(params, enc, classes)?;
    let space = enc.space();
    check_batch(batch, classes.len(), space.d_embed)?;

    let mut grads: Gradients = params
        .learnable()
        .iter()
        .map(|t| Array2::zeros(t.dim()))
        .collect();
    let mut total = 0.0;

    if !batch.is_empty() {
        let fwd = encode_classes(params, enc, classes)?;
        let n = classes.len();
        let tau = space.temperature;
        // cosine needs unit vectors and norms of the class embeddings
        let text_norms: Vec<f64> = fwd.text.iter().map(|t| l2_norm(t.view())).collect();
        if space.similarity == Similarity::Cosine {
            if let Some(i) = text_norms.iter().position(|&n| n == 0.0) {
                return Err(Error::Degenerate(format!("class {i} text embedding has zero norm")));
            }
        }
        let mut cotangents = vec![Array1::<f64>::zeros(space.d_embed); n];
        for (b, ex) in batch.iter().enumerate() {
            let v: Array1<f64> = match space.similarity {
                Similarity::Dot => ex.embedding.clone(),
                Similarity::Cosine => normalized(ex.embedding.view(), &format!("batch item {b}"))?,
            };
            let sims: Vec<f64> = fwd
                .text
                .iter()
                .zip(&text_norms)
                .map(|(t, &norm)| match space.similarity {
                    Similarity::Dot => t.dot(&v),
                    Similarity::Cosine => t.dot(&v) / norm,
                })
                .collect();
            let lp = log_probs(&sims, tau);
            total -= lp[ex.label];
            if !want_grad {
                continue;
            }
            for i in 0..n {
                let p = lp[i].exp();
                let dlogit = p - if i == ex.label { 1.0 } else { 0.0 };
                let dsim = dlogit / tau;
                match space.similarity {
                    Similarity::Dot => cotangents[i].scaled_add(dsim, &v),
                    Similarity::Cosine => {
                        // ∂cos/∂t = (v̂ − cos · t̂) / ‖t‖
                        let norm = text_norms[i];
                        let t_hat = &fwd.text[i] / norm;
                        let dir = (&v - &(t_hat * sims[i])) / norm;
                        cotangents[i].scaled_add(dsim, &dir);
                    }
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        if want_grad {
            for class in classes.iter() {
                let i = class.class_id;
                let g = enc.text_input_gradient(&fwd.sequences[i], cotangents[i].view())?;
                scatter_input_gradient(params, i, g, &mut grads);
            }
        }
    }

    total += alpha * parameter_l2(params);
    if want_grad && alpha != 0.0 {
        if let Some(offsets) = params.offsets() {
            for (i, eps) in offsets.iter().enumerate() {
                let slot = params.offset_slot(i).expect("offsets present");
                grads[slot].scaled_add(alpha, eps);
            }
        }
    }
    Ok((total, grads))
}

/// Routes the gradient w.r.t. one assembled sequence into context and offset
/// slots. Rows of a fixed prompt or of the class name itself are dropped.
fn scatter_input_gradient(params: &TextParameterSet, class: usize, g: Array2<f64>, grads: &mut Gradients) {
    let prefix = params.prefix_len();
    if let Some(slot) = params.context_slot(class) {
        let mut acc = grads[slot].view_mut();
        acc += &g.slice(s![..prefix, ..]);
    }
    if let Some(slot) = params.offset_slot(class) {
        let mut acc = grads[slot].view_mut();
        acc += &g.slice(s![prefix.., ..]);
    }
}
