//! Toy media files and feature-cache construction.
//!
//! A toy media file is JSON `{"frames": [[f64, ...], ...]}`, one raw frame
//! vector per entry, consumed by the built-in visual towers.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_video, uniform_frame_indices, FeatureCache, FrozenDualEncoder, Media};
use crate::error::{Error, Result};
use crate::io::atomic::write_atomic;
use crate::io::manifest::{Manifest, MediaRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediaFile {
    pub frames: Vec<Vec<f64>>,
}

pub fn read_media_file(path: &Path) -> Result<MediaFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_media_file(path: &Path, media: &MediaFile) -> Result<()> {
    let text = serde_json::to_string(media).expect("media serializes");
    write_atomic(path, text.as_bytes())
}

/// Frames fed to the visual tower: `frames_per_video` uniformly spaced
/// frames, or every frame once when the video is shorter.
pub fn select_frames(all: &[Vec<f64>], frames_per_video: usize) -> Vec<Media> {
    let k = frames_per_video.min(all.len());
    uniform_frame_indices(all.len(), k)
        .into_iter()
        .map(|i| Media::Pixels(all[i].iter().copied().collect()))
        .collect()
}

/// Video embedding of one manifest row with frame media.
pub fn embed_row(enc: &dyn FrozenDualEncoder, base_dir: &Path, path: &str, declared: usize) -> Result<Vec<f32>> {
    let file = read_media_file(&base_dir.join(path))?;
    if file.frames.len() != declared {
        return Err(Error::Integrity(format!(
            "{path}: manifest declares {declared} frames, file has {}",
            file.frames.len()
        )));
    }
    if file.frames.is_empty() {
        return Err(Error::EmptyInput(format!("{path} has no frames")));
    }
    let video = encode_video(enc, &select_frames(&file.frames, enc.frames_per_video()))?;
    Ok(video.iter().map(|&v| v as f32).collect())
}

/// Encodes every frame-media row of `manifest` and writes the cache to `out`.
/// Nothing is written unless every row succeeds. Rows that reference a cache
/// key are skipped.
pub fn build_cache(
    manifest: &Manifest,
    base_dir: &Path,
    enc: &dyn FrozenDualEncoder,
    out: &Path,
) -> Result<FeatureCache> {
    let results: Vec<(String, Result<Vec<f32>>)> = manifest
        .rows
        .par_iter()
        .filter_map(|row| match &row.media {
            MediaRef::Frames(f) => Some((row.id.clone(), embed_row(enc, base_dir, &f.path, f.frames))),
            MediaRef::Key(_) => None,
        })
        .collect();
    let mut cache = FeatureCache::new(enc.space().d_embed);
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(v) => cache.insert(id, v)?,
            Err(e) => failures.push(format!("{id}: {e}")),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Failures {
            count: failures.len(),
            failures,
        });
    }
    cache.save(out)?;
    Ok(cache)
}
