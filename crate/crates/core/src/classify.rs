//! Zero-shot classification by embedding similarity.
//!
//! `p(y = i | x) = softmax_i(⟨E^t(text_i), E^v(x)⟩ / τ)` where `text_i` is the
//! assembled text input for class `i` and `⟨·,·⟩` is the space's similarity.

use ndarray::{Array1, Array2, ArrayView1};

use crate::encoder::FrozenDualEncoder;
use crate::error::{Error, Result};
use crate::space::{EmbeddingSpace, Similarity};
use crate::textparams::TextParameterSet;
use crate::tokens::{ClassSet, TokenSequence};

pub const DEFAULT_PROMPT: &str = "a video of {}";

/// A prompt template with exactly one trailing `{}` placeholder and the
/// tokenization of the text before it.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    template: String,
    prefix: TokenSequence,
}

/// Returns the text preceding the placeholder.
pub fn template_prefix(template: &str) -> Result<&str> {
    let count = template.matches("{}").count();
    if count != 1 {
        return Err(Error::config(format!(
            "prompt template {template:?} must contain exactly one \"{{}}\", found {count}"
        )));
    }
    let (before, after) = template.split_once("{}").expect("counted above");
    if !after.trim().is_empty() {
        return Err(Error::config(format!(
            "prompt template {template:?} has text after the class name"
        )));
    }
    Ok(before)
}

impl PromptSpec {
    pub fn new(template: &str, enc: &dyn FrozenDualEncoder) -> Result<Self> {
        let prefix_text = template_prefix(template)?;
        let mut prefix = enc.tokenize(prefix_text)?;
        if prefix.is_empty() {
            prefix = TokenSequence::empty(enc.space().d_token);
        }
        Ok(Self {
            template: template.to_string(),
            prefix,
        })
    }

    /// A prompt whose prefix tokens are given directly.
    pub fn from_prefix(template: &str, prefix: TokenSequence) -> Result<Self> {
        template_prefix(template)?;
        Ok(Self {
            template: template.to_string(),
            prefix,
        })
    }

    /// The bare `"{}"` prompt.
    pub fn empty(d_token: usize) -> Self {
        Self {
            template: "{}".to_string(),
            prefix: TokenSequence::empty(d_token),
        }
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    /// Tokenized text preceding the class name (`q`).
    pub fn prefix(&self) -> &TokenSequence {
        &self.prefix
    }

    pub fn render(&self, class_name: &str) -> String {
        self.template.replacen("{}", class_name, 1)
    }
}

/// Anything that maps a visual embedding to a class id.
pub trait Scorer {
    fn predict(&self, visual: ArrayView1<'_, f64>) -> Result<usize>;
}

/// One text embedding per class, scored against visual embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    class_text_embeddings: Array2<f64>,
    space: EmbeddingSpace,
}

impl ClassifierHead {
    pub fn new(class_text_embeddings: Array2<f64>, space: EmbeddingSpace) -> Result<Self> {
        if class_text_embeddings.nrows() == 0 {
            return Err(Error::config("classifier head needs at least one class"));
        }
        if class_text_embeddings.ncols() != space.d_embed {
            return Err(Error::dim(format!(
                "head width {} does not match d_embed {}",
                class_text_embeddings.ncols(),
                space.d_embed
            )));
        }
        if let Some((i, _)) = class_text_embeddings
            .indexed_iter()
            .find(|(_, v)| !v.is_finite())
        {
            return Err(Error::NonFinite(format!("class embedding row {}", i.0)));
        }
        Ok(Self {
            class_text_embeddings,
            space,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_text_embeddings.nrows()
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.class_text_embeddings
    }

    pub fn space(&self) -> &EmbeddingSpace {
        &self.space
    }

    /// Raw similarities `⟨t_i, v⟩`, before temperature scaling.
    pub fn similarities(&self, visual: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
        similarities(self.class_text_embeddings.view(), visual, self.space.similarity)
    }

    pub fn logits(&self, visual: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
        let tau = self.space.temperature;
        Ok(self.similarities(visual)?.into_iter().map(|s| s / tau).collect())
    }

    pub fn probabilities(&self, visual: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(visual)?))
    }
}

impl Scorer for ClassifierHead {
    /// Argmax of the raw similarities, lowest class id on ties. This is the
    /// argmax of the probabilities for every temperature.
    fn predict(&self, visual: ArrayView1<'_, f64>) -> Result<usize> {
        Ok(argmax(&self.similarities(visual)?))
    }
}

pub(crate) fn l2_norm(v: ArrayView1<'_, f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn normalized(v: ArrayView1<'_, f64>, what: &str) -> Result<Array1<f64>> {
    let n = l2_norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate(format!("{what} has norm {n}")));
    }
    Ok(&v / n)
}

/// Similarity of `visual` against every row of `rows`.
pub fn similarities(
    rows: ndarray::ArrayView2<'_, f64>,
    visual: ArrayView1<'_, f64>,
    similarity: Similarity,
) -> Result<Vec<f64>> {
    if visual.len() != rows.ncols() {
        return Err(Error::dim(format!(
            "visual width {} does not match head width {}",
            visual.len(),
            rows.ncols()
        )));
    }
    if visual.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("visual embedding".into()));
    }
    match similarity {
        Similarity::Dot => Ok(rows.rows().into_iter().map(|r| r.dot(&visual)).collect()),
        Similarity::Cosine => {
            let v = normalized(visual, "visual embedding")?;
            rows.rows()
                .into_iter()
                .enumerate()
                .map(|(i, r)| {
                    let n = l2_norm(r);
                    if n == 0.0 {
                        return Err(Error::Degenerate(format!("class {i} embedding has zero norm")));
                    }
                    Ok(r.dot(&v) / n)
                })
                .collect()
        }
    }
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn class_probabilities(visual: ArrayView1<'_, f64>, head: &ClassifierHead) -> Result<Vec<f64>> {
    head.probabilities(visual)
}

pub fn predict(visual: ArrayView1<'_, f64>, head: &ClassifierHead) -> Result<usize> {
    head.predict(visual)
}

fn encode_rows<F>(enc: &dyn FrozenDualEncoder, classes: &ClassSet, mut text_for: F) -> Result<Array2<f64>>
where
    F: FnMut(usize) -> Result<TokenSequence>,
{
    let mut rows = Array2::zeros((classes.len(), enc.space().d_embed));
    for class in classes.iter() {
        let seq = text_for(class.class_id)?;
        let e = enc.encode_text(&seq).map_err(|e| match e {
            Error::SequenceLength { len, max, .. } => Error::SequenceLength {
                len,
                max,
                context: Some(format!("class {} ({:?})", class.class_id, class.name_text)),
            },
            other => other,
        })?;
        rows.row_mut(class.class_id).assign(&e);
    }
    Ok(rows)
}

/// Head over `[q, n_i]` for every class.
pub fn zero_shot_head(
    enc: &dyn FrozenDualEncoder,
    prompt: &PromptSpec,
    classes: &ClassSet,
) -> Result<ClassifierHead> {
    let rows = encode_rows(enc, classes, |i| {
        prompt.prefix().concat(&classes.get(i).expect("id in range").name_tokens)
    })?;
    ClassifierHead::new(rows, enc.space().clone())
}

/// Head over the method-specific assembled inputs; `prompt` is used only when
/// `params` is `None`.
pub fn build_head(
    enc: &dyn FrozenDualEncoder,
    prompt: &PromptSpec,
    classes: &ClassSet,
    params: Option<&TextParameterSet>,
) -> Result<ClassifierHead> {
    match params {
        None => zero_shot_head(enc, prompt, classes),
        Some(p) => tuned_head(enc, p, classes),
    }
}

pub fn tuned_head(
    enc: &dyn FrozenDualEncoder,
    params: &TextParameterSet,
    classes: &ClassSet,
) -> Result<ClassifierHead> {
    if params.num_classes() != classes.len() {
        return Err(Error::config(format!(
            "parameter set covers {} classes, class set has {}",
            params.num_classes(),
            classes.len()
        )));
    }
    let rows = encode_rows(enc, classes, |i| {
        params.assemble(classes.get(i).expect("id in range"))
    })?;
    ClassifierHead::new(rows, enc.space().clone())
}

/// Prompt ensemble: each class row is the normalized mean of the normalized
/// per-prompt text embeddings.
pub fn ensemble_head(
    enc: &dyn FrozenDualEncoder,
    prompts: &[PromptSpec],
    classes: &ClassSet,
) -> Result<ClassifierHead> {
    if prompts.is_empty() {
        return Err(Error::config("prompt ensemble needs at least one prompt"));
    }
    let mut sum = Array2::<f64>::zeros((classes.len(), enc.space().d_embed));
    for prompt in prompts {
        let head = zero_shot_head(enc, prompt, classes)?;
        for (i, row) in head.embeddings().rows().into_iter().enumerate() {
            let unit = normalized(row, &format!("class {i} text embedding"))?;
            let mut acc = sum.row_mut(i);
            acc += &unit;
        }
    }
    let mut rows = Array2::zeros(sum.dim());
    for (i, row) in sum.rows().into_iter().enumerate() {
        let mean = &row / prompts.len() as f64;
        rows.row_mut(i)
            .assign(&normalized(mean.view(), &format!("ensembled class {i}"))?);
    }
    ClassifierHead::new(rows, enc.space().clone())
}
