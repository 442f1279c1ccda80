//! Baselines that leave the text input alone: a logistic-regression probe on
//! visual embeddings and text/visual prototypes.

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;

use crate::classify::{argmax, l2_norm, normalized, similarities, ClassifierHead, Scorer};
use crate::error::{Error, Result};
use crate::lbfgs::{minimize, LbfgsOptions, LbfgsReport};
use crate::protocol::evaluate;
use crate::space::{EmbeddingSpace, Similarity};
use crate::train::Example;

/// `n` points spaced evenly in log scale from `lo` to `hi`, both included.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| {
                    if i == 0 {
                        lo
                    } else if i == n - 1 {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

pub fn default_lambda_grid() -> Vec<f64> {
    geometric_grid(1e-6, 1e6, 96)
}

pub fn default_text_weight_grid() -> Vec<f64> {
    geometric_grid(1e-2, 1e2, 16)
}

/// Multinomial logistic regression `softmax(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbeModel {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub lambda: f64,
    pub objective_at_zero: f64,
    pub objective: f64,
    pub report: LbfgsReport,
}

impl LinearProbeModel {
    pub fn logits(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if x.len() != self.weights.ncols() {
            return Err(Error::dim(format!(
                "probe expects width {}, got {}",
                self.weights.ncols(),
                x.len()
            )));
        }
        Ok(self.weights.dot(&x) + &self.bias)
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Scorer for LinearProbeModel {
    fn predict(&self, visual: ArrayView1<'_, f64>) -> Result<usize> {
        Ok(argmax(self.logits(visual)?.as_slice().expect("contiguous")))
    }
}

/// Summed cross-entropy plus `λ‖W‖²/2` and its gradient over `[W | b]`
/// flattened row-major, then `b`.
fn probe_objective(x: &[f64], data: &[Example], n: usize, d: usize, lambda: f64) -> (f64, Vec<f64>) {
    let (w, b) = x.split_at(n * d);
    let mut grad = vec![0.0; x.len()];
    let mut value = 0.0;
    let mut logits = vec![0.0; n];
    for ex in data {
        for i in 0..n {
            logits[i] = b[i] + (0..d).map(|j| w[i * d + j] * ex.embedding[j]).sum::<f64>();
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + z.ln();
        value += lse - logits[ex.label];
        for i in 0..n {
            let p = (logits[i] - lse).exp() - if i == ex.label { 1.0 } else { 0.0 };
            for j in 0..d {
                grad[i * d + j] += p * ex.embedding[j];
            }
            grad[n * d + i] += p;
        }
    }
    for (k, wk) in w.iter().enumerate() {
        value += 0.5 * lambda * wk * wk;
        grad[k] += lambda * wk;
    }
    (value, grad)
}

pub fn linear_probe_fit(train: &[Example], num_classes: usize, lambda: f64) -> Result<LinearProbeModel> {
    linear_probe_fit_with(train, num_classes, lambda, &LbfgsOptions::default())
}

pub fn linear_probe_fit_with(
    train: &[Example],
    num_classes: usize,
    lambda: f64,
    opts: &LbfgsOptions,
) -> Result<LinearProbeModel> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!("lambda must be finite and > 0, got {lambda}")));
    }
    let first = train.first().ok_or_else(|| Error::config("linear probe needs training data"))?;
    let d = first.embedding.len();
    for (i, ex) in train.iter().enumerate() {
        if ex.embedding.len() != d {
            return Err(Error::dim(format!("training item {i} has width {}, expected {d}", ex.embedding.len())));
        }
        if ex.label >= num_classes {
            return Err(Error::config(format!("training item {i} has label {} >= {num_classes}", ex.label)));
        }
        if ex.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("training item {i}")));
        }
    }
    let mut present: Vec<usize> = train.iter().map(|e| e.label).collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::config("linear probe needs at least two classes present"));
    }
    let n = num_classes;
    let x0 = vec![0.0; n * d + n];
    let objective_at_zero = probe_objective(&x0, train, n, d, lambda).0;
    let (x, report) = minimize(x0, |x| Ok(probe_objective(x, train, n, d, lambda)), opts)?;
    let objective = report.value;
    if objective > objective_at_zero {
        return Err(Error::Integrity(format!(
            "probe objective rose from {objective_at_zero} to {objective}"
        )));
    }
    let weights = Array2::from_shape_vec((n, d), x[..n * d].to_vec()).expect("sized above");
    let bias = Array1::from(x[n * d..].to_vec());
    Ok(LinearProbeModel {
        weights,
        bias,
        lambda,
        objective_at_zero,
        objective,
        report,
    })
}

/// One class prototype per row, scored with the head's similarity and τ.
#[derive(Debug, Clone, PartialEq)]
pub struct VlPrototypeModel {
    pub prototypes: Array2<f64>,
    pub text_weight: f64,
    pub space: EmbeddingSpace,
}

impl Scorer for VlPrototypeModel {
    fn predict(&self, visual: ArrayView1<'_, f64>) -> Result<usize> {
        Ok(argmax(&similarities(self.prototypes.view(), visual, self.space.similarity)?))
    }
}

/// Prototype `i` combines class `i`'s text embedding with the mean of its
/// support embeddings. Under cosine similarity both parts are unit-normalized
/// first and the result is normalized; under dot similarity the raw vectors
/// are combined, so that the two limits of `w_t` reproduce zero-shot and
/// nearest-mean classification in either space.
pub fn vl_prototype_build(
    head: &ClassifierHead,
    support: &[Vec<Array1<f64>>],
    text_weight: f64,
) -> Result<VlPrototypeModel> {
    if !(text_weight > 0.0 && text_weight.is_finite()) {
        return Err(Error::config(format!("text weight must be finite and > 0, got {text_weight}")));
    }
    let n = head.num_classes();
    if support.len() != n {
        return Err(Error::config(format!("support lists {} classes, head has {n}", support.len())));
    }
    let space = head.space().clone();
    let d = space.d_embed;
    let cosine = space.similarity == Similarity::Cosine;
    let mut prototypes = Array2::zeros((n, d));
    for (i, items) in support.iter().enumerate() {
        if items.is_empty() {
            return Err(Error::config(format!("class {i} has no support items")));
        }
        let mut mean = Array1::<f64>::zeros(d);
        for (j, v) in items.iter().enumerate() {
            if v.len() != d {
                return Err(Error::dim(format!("support item {j} of class {i} has width {}", v.len())));
            }
            if cosine {
                mean += &normalized(v.view(), &format!("support item {j} of class {i}"))?;
            } else {
                mean += v;
            }
        }
        mean /= items.len() as f64;
        let text = head.embeddings().row(i);
        let proto = if cosine {
            let t = normalized(text, &format!("class {i} text embedding"))?;
            let combined = t * text_weight + &mean;
            if l2_norm(combined.view()) == 0.0 {
                return Err(Error::Degenerate(format!("class {i} prototype is zero")));
            }
            normalized(combined.view(), &format!("class {i} prototype"))?
        } else {
            &text * text_weight + &mean
        };
        prototypes.row_mut(i).assign(&proto);
    }
    Ok(VlPrototypeModel {
        prototypes,
        text_weight,
        space,
    })
}

/// Groups `items` by label into `num_classes` lists.
pub fn support_by_class(items: &[Example], num_classes: usize) -> Result<Vec<Vec<Array1<f64>>>> {
    let mut out = vec![Vec::new(); num_classes];
    for (i, ex) in items.iter().enumerate() {
        out.get_mut(ex.label)
            .ok_or_else(|| Error::config(format!("item {i} has label {} >= {num_classes}", ex.label)))?
            .push(ex.embedding.clone());
    }
    Ok(out)
}

/// Validation accuracy of each grid value, in grid order.
pub fn linear_probe_sweep(
    train: &[Example],
    val: &[Example],
    num_classes: usize,
    lambdas: &[f64],
) -> Result<Vec<f64>> {
    lambdas
        .par_iter()
        .map(|&l| evaluate(&linear_probe_fit(train, num_classes, l)?, val))
        .collect()
}

pub fn vl_prototype_sweep(
    head: &ClassifierHead,
    train: &[Example],
    val: &[Example],
    weights: &[f64],
) -> Result<Vec<f64>> {
    let support = support_by_class(train, head.num_classes())?;
    weights
        .par_iter()
        .map(|&w| evaluate(&vl_prototype_build(head, &support, w)?, val))
        .collect()
}
