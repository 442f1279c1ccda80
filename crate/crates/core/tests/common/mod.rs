//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use nametune::classify::PromptSpec;
use nametune::encoder::{
    BuiltinEncoder, EncoderSpec, FeatureCache, FrozenDualEncoder, LinearEncoderConfig,
};
use nametune::io::manifest::{load_manifest, Manifest};
use nametune::protocol::DatasetSplit;
use nametune::rng::SeededRng;
use nametune::space::Similarity;
use nametune::textparams::{init_parameters, Method, TextParameterSet};
use nametune::tokens::{ClassEntry, ClassSet};
use nametune::toy::toy_class_names;
use nametune::train::{loss, Example};
use ndarray::Array1;

pub const FD_STEP: f64 = 1e-3;
pub const METHODS: [Method; 4] = [Method::NameTuning, Method::Coop, Method::CoopCsc, Method::Cona];

pub fn transformer() -> BuiltinEncoder {
    EncoderSpec::default().build().unwrap()
}

pub fn linear() -> BuiltinEncoder {
    EncoderSpec::Linear(LinearEncoderConfig::default()).build().unwrap()
}

pub fn linear_cosine() -> BuiltinEncoder {
    EncoderSpec::Linear(LinearEncoderConfig {
        similarity: Similarity::Cosine,
        temperature: 0.1,
        ..Default::default()
    })
    .build()
    .unwrap()
}

pub fn class_set(enc: &dyn FrozenDualEncoder, names: &[String]) -> ClassSet {
    ClassSet::new(
        names
            .iter()
            .enumerate()
            .map(|(i, n)| ClassEntry {
                class_id: i,
                name_text: n.clone(),
                name_tokens: enc.tokenize(n).unwrap(),
            })
            .collect(),
    )
    .unwrap()
}

pub fn toy_classes(enc: &dyn FrozenDualEncoder, n: usize) -> ClassSet {
    class_set(enc, &toy_class_names(n).unwrap())
}

pub fn prompt(enc: &dyn FrozenDualEncoder) -> PromptSpec {
    PromptSpec::new(nametune::classify::DEFAULT_PROMPT, enc).unwrap()
}

pub fn random_vector(rng: &mut SeededRng, d: usize, std: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(d, || rng.normal(0.0, std))
}

pub fn random_batch(rng: &mut SeededRng, size: usize, d: usize, n_classes: usize) -> Vec<Example> {
    (0..size)
        .map(|_| Example::new(random_vector(rng, d, 1.0), rng.below(n_classes as u64) as usize))
        .collect()
}

/// Fresh parameters with every learnable value moved off its initialization.
pub fn random_params(
    method: Method,
    enc: &dyn FrozenDualEncoder,
    classes: &ClassSet,
    l_context: usize,
    rng: &mut SeededRng,
    std: f64,
) -> TextParameterSet {
    let p = prompt(enc);
    let mut params = init_parameters(method, classes, l_context, Some(&p), &rng.fork("init"), false).unwrap();
    let values: Vec<f64> = params.flatten().iter().map(|v| v + rng.normal(0.0, std)).collect();
    params.set_flat(&values).unwrap();
    params
}

/// Central differences of the objective over every learnable value.
pub fn finite_difference_gradient(
    params: &TextParameterSet,
    batch: &[Example],
    enc: &dyn FrozenDualEncoder,
    classes: &ClassSet,
    alpha: f64,
) -> Vec<f64> {
    let x = params.flatten();
    let mut probe = params.clone();
    (0..x.len())
        .map(|i| {
            let mut plus = x.clone();
            plus[i] += FD_STEP;
            probe.set_flat(&plus).unwrap();
            let fp = loss(&probe, batch, enc, classes, alpha).unwrap();
            let mut minus = x.clone();
            minus[i] -= FD_STEP;
            probe.set_flat(&minus).unwrap();
            let fm = loss(&probe, batch, enc, classes, alpha).unwrap();
            (fp - fm) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Gradients with a smaller norm are rounding noise around an exact zero
/// (a shared context under a linear dot-product encoder shifts every logit
/// equally), so the error is measured against this floor instead. Central
/// differences at `FD_STEP` carry roughly 1e-12 of roundoff per entry.
pub const GRADIENT_NORM_FLOOR: f64 = 1e-6;

/// `‖a − b‖ / max(‖a‖, ‖b‖, GRADIENT_NORM_FLOOR)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(GRADIENT_NORM_FLOOR)
}

/// Softmax of temperature-scaled similarities, written out with plain loops.
pub fn oracle_probabilities(text: &[Vec<f64>], v: &[f64], similarity: Similarity, tau: f64) -> Vec<f64> {
    let mut sims = Vec::new();
    for t in text {
        let mut dot = 0.0;
        let mut tt = 0.0;
        let mut vv = 0.0;
        for k in 0..v.len() {
            dot += t[k] * v[k];
            tt += t[k] * t[k];
            vv += v[k] * v[k];
        }
        sims.push(match similarity {
            Similarity::Dot => dot,
            Similarity::Cosine => dot / (tt.sqrt() * vv.sqrt()),
        });
    }
    let mut denom = 0.0;
    for s in &sims {
        denom += (s / tau).exp();
    }
    sims.iter().map(|s| (s / tau).exp() / denom).collect()
}

/// Text embeddings of every class under `params`.
pub fn class_text(params: &TextParameterSet, enc: &dyn FrozenDualEncoder, classes: &ClassSet) -> Vec<Vec<f64>> {
    classes
        .iter()
        .map(|c| enc.encode_text(&params.assemble(c).unwrap()).unwrap().to_vec())
        .collect()
}

/// `−Σ log p(y|x) + α/2 Σ_i Σ_jk ε_i[j,k]²`.
pub fn oracle_loss(
    params: &TextParameterSet,
    batch: &[Example],
    enc: &dyn FrozenDualEncoder,
    classes: &ClassSet,
    alpha: f64,
) -> f64 {
    let text = class_text(params, enc, classes);
    let space = enc.space();
    let mut total = 0.0;
    for ex in batch {
        let p = oracle_probabilities(&text, ex.embedding.as_slice().unwrap(), space.similarity, space.temperature);
        total -= p[ex.label].ln();
    }
    let mut sq = 0.0;
    if let Some(offsets) = params.offsets() {
        for e in offsets {
            for v in e.iter() {
                sq += v * v;
            }
        }
    }
    total + alpha * sq / 2.0
}

pub fn toy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join("toy")
}

pub struct ToyFixture {
    pub enc: BuiltinEncoder,
    pub manifest: Manifest,
    pub cache: FeatureCache,
    pub split: DatasetSplit,
    pub classes: ClassSet,
}

/// The bundled toy dataset with its committed feature cache.
pub fn bundled_toy() -> ToyFixture {
    let dir = toy_dir();
    let enc = transformer();
    let manifest = load_manifest(&dir.join("manifest.jsonl")).unwrap();
    let cache = FeatureCache::load(&dir.join("features.ntfc")).unwrap();
    let split = manifest.dataset_split(&cache).unwrap();
    let classes = manifest.class_set(&enc).unwrap();
    ToyFixture {
        enc,
        manifest,
        cache,
        split,
        classes,
    }
}

pub fn sha256_file(path: &std::path::Path) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

/// An in-memory meta-learning split of the toy generator: classes are dealt
/// into meta-train, meta-val and meta-test thirds in id order.
pub fn meta_toy(enc: &BuiltinEncoder, num_classes: usize, items_per_class: usize) -> (DatasetSplit, ClassSet) {
    use nametune::protocol::{Item, Phase};
    use nametune::toy::{generate_toy, ToyConfig};
    use std::collections::BTreeMap;

    let cfg = ToyConfig {
        num_classes,
        items_per_class,
        ..Default::default()
    };
    let data = generate_toy(enc, &cfg).unwrap();
    let third = num_classes / 3;
    let mut partitions: BTreeMap<Phase, Vec<usize>> = BTreeMap::new();
    for c in 0..num_classes {
        let phase = if c < third {
            Phase::MetaTrain
        } else if c < 2 * third {
            Phase::MetaVal
        } else {
            Phase::MetaTest
        };
        partitions.entry(phase).or_default().push(c);
    }
    let items = data
        .videos
        .iter()
        .map(|v| Item {
            id: v.id.clone(),
            label: v.class_id,
            embedding: v.embedding.clone(),
        })
        .collect();
    (
        DatasetSplit::meta_learning(partitions, items).unwrap(),
        class_set(enc, &data.class_names),
    )
}

/// Every structural invariant of an episode; returns a description of the
/// first violation.
pub fn episode_violation(
    ep: &nametune::protocol::Episode,
    pool: &[usize],
    n: usize,
    k: usize,
) -> Option<String> {
    use std::collections::{BTreeMap, BTreeSet};
    if ep.classes.len() != n || ep.n_way != n || ep.k_shot != k {
        return Some(format!("expected {n}-way {k}-shot, got classes {:?}", ep.classes));
    }
    if ep.classes.windows(2).any(|w| w[0] >= w[1]) {
        return Some(format!("classes not strictly ascending: {:?}", ep.classes));
    }
    if let Some(c) = ep.classes.iter().find(|c| !pool.contains(c)) {
        return Some(format!("class {c} is outside the phase"));
    }
    let mut support: BTreeMap<usize, usize> = BTreeMap::new();
    for it in &ep.support {
        *support.entry(it.label).or_default() += 1;
    }
    if support.keys().copied().collect::<Vec<_>>() != ep.classes || support.values().any(|&c| c != k) {
        return Some(format!("support histogram {support:?}"));
    }
    let support_ids: BTreeSet<&str> = ep.support.iter().map(|i| i.id.as_str()).collect();
    if support_ids.len() != ep.support.len() {
        return Some("duplicate support items".into());
    }
    let mut query_classes = BTreeSet::new();
    for q in &ep.query {
        if support_ids.contains(q.id.as_str()) {
            return Some(format!("item {} is both support and query", q.id));
        }
        if ep.classes.binary_search(&q.label).is_err() {
            return Some(format!("query {} has foreign class {}", q.id, q.label));
        }
        query_classes.insert(q.label);
    }
    if query_classes.into_iter().collect::<Vec<_>>() != ep.classes {
        return Some("a class has no queries".into());
    }
    let local = ep.support_examples();
    if local.iter().any(|e| e.label >= n) {
        return Some("local labels out of range".into());
    }
    None
}

/// Sample mean and sample standard deviation with plain loops.
pub fn hand_mean_std(values: &[f64]) -> (f64, f64) {
    let mut sum = 0.0;
    for v in values {
        sum += v;
    }
    let mean = sum / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let mut ss = 0.0;
    for v in values {
        ss += (v - mean) * (v - mean);
    }
    (mean, (ss / (values.len() as f64 - 1.0)).sqrt())
}
