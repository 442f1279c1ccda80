//! Deterministic synthetic video dataset for the built-in encoders.
//!
//! Each class is a verb-object pair. Its videos sit around the text embedding
//! of the prompted class name shifted by a hidden per-class offset on the name
//! tokens, so the plain name is a poor zero-shot classifier while a learned
//! name offset can recover the classes.

use ndarray::Array1;

use crate::classify::{normalized, PromptSpec};
use crate::encoder::{BuiltinEncoder, FrozenDualEncoder};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::space::Similarity;

const VERBS: [&str; 5] = ["open", "close", "wipe", "pour", "lift"];
const OBJECTS: [&str; 5] = ["door", "drawer", "table", "cup", "box"];

/// Up to 25 names; consecutive classes share the object.
pub fn toy_class_names(n: usize) -> Result<Vec<String>> {
    if n == 0 || n > VERBS.len() * OBJECTS.len() {
        return Err(Error::config(format!("toy datasets have 1 to 25 classes, asked for {n}")));
    }
    Ok((0..n)
        .map(|i| format!("{} {}", VERBS[i % VERBS.len()], OBJECTS[i / VERBS.len()]))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub items_per_class: usize,
    pub frames_per_item: usize,
    /// Std of the hidden name-token offsets.
    pub offset_std: f64,
    /// Std of per-video noise around the class center.
    pub noise_std: f64,
    /// Std of per-frame jitter; frames average back to the video embedding.
    pub frame_jitter_std: f64,
    pub prompt: String,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            num_classes: 5,
            items_per_class: 24,
            frames_per_item: 4,
            offset_std: 1.0,
            noise_std: 0.05,
            frame_jitter_std: 0.1,
            prompt: crate::classify::DEFAULT_PROMPT.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyVideo {
    pub id: String,
    pub class_id: usize,
    /// Video embedding, the exact mean of the frames' embeddings.
    pub embedding: Array1<f64>,
    pub frames: Vec<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyData {
    pub class_names: Vec<String>,
    /// Class-major, `items_per_class` per class.
    pub videos: Vec<ToyVideo>,
}

pub fn generate_toy(enc: &BuiltinEncoder, cfg: &ToyConfig) -> Result<ToyData> {
    if cfg.items_per_class == 0 || cfg.frames_per_item == 0 {
        return Err(Error::config("toy data needs at least one item and one frame"));
    }
    let names = toy_class_names(cfg.num_classes)?;
    let prompt = PromptSpec::new(&cfg.prompt, enc)?;
    let root = SeededRng::new(cfg.seed);
    let mut offset_rng = root.fork("hidden-offsets");
    let mut video_rng = root.fork("videos");
    let cosine = enc.space().similarity == Similarity::Cosine;
    let d = enc.space().d_embed;

    let mut videos = Vec::with_capacity(cfg.num_classes * cfg.items_per_class);
    for (c, name) in names.iter().enumerate() {
        let tokens = enc.tokenize(name)?;
        let delta = tokens.rows().mapv(|_| offset_rng.normal(0.0, cfg.offset_std));
        let center = enc.encode_text(&prompt.prefix().concat(&tokens.add_offset(&delta)?)?)?;
        let center = if cosine {
            normalized(center.view(), &format!("toy class {c} center"))?
        } else {
            center
        };
        for j in 0..cfg.items_per_class {
            let embedding = &center + &Array1::from_shape_simple_fn(d, || video_rng.normal(0.0, cfg.noise_std));
            let mut jitter: Vec<Array1<f64>> = (0..cfg.frames_per_item)
                .map(|_| Array1::from_shape_simple_fn(d, || video_rng.normal(0.0, cfg.frame_jitter_std)))
                .collect();
            let mean = jitter.iter().fold(Array1::zeros(d), |acc, x| acc + x) / cfg.frames_per_item as f64;
            for x in jitter.iter_mut() {
                *x -= &mean;
            }
            let frames = jitter
                .iter()
                .map(|x| enc.frame_for_embedding((&embedding + x).view()))
                .collect();
            videos.push(ToyVideo {
                id: format!("c{c}-v{j:03}"),
                class_id: c,
                embedding,
                frames,
            });
        }
    }
    Ok(ToyData {
        class_names: names,
        videos,
    })
}
