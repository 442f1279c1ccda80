//! Writes a generated toy dataset as a manifest plus per-video media files.

use std::path::Path;

use crate::encoder::BuiltinEncoder;
use crate::error::{Error, Result};
use crate::io::manifest::{save_manifest, FrameMedia, ManifestRow, MediaRef};
use crate::io::media::{write_media_file, MediaFile};
use crate::toy::{generate_toy, ToyConfig};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyLayout {
    /// Per class: `train` items, then `val`, then the rest as test.
    Traditional { train: usize, val: usize },
    /// Classes in order: `train` meta-train classes, `val` meta-val, the rest meta-test.
    MetaLearning { train: usize, val: usize },
}

impl ToyLayout {
    fn tag(&self, class_id: usize, item: usize, items_per_class: usize, num_classes: usize) -> Result<&'static str> {
        Ok(match *self {
            ToyLayout::Traditional { train, val } => {
                if train == 0 || val == 0 || train + val >= items_per_class {
                    return Err(Error::config(format!(
                        "toy layout {train}/{val} leaves no test items out of {items_per_class}"
                    )));
                }
                if item < train {
                    "train"
                } else if item < train + val {
                    "val"
                } else {
                    "test"
                }
            }
            ToyLayout::MetaLearning { train, val } => {
                if train == 0 || val == 0 || train + val >= num_classes {
                    return Err(Error::config(format!(
                        "toy layout {train}/{val} leaves no meta-test classes out of {num_classes}"
                    )));
                }
                if class_id < train {
                    "meta_train"
                } else if class_id < train + val {
                    "meta_val"
                } else {
                    "meta_test"
                }
            }
        })
    }
}

/// Generates the toy data and writes `manifest.jsonl` and `media/<id>.json`
/// under `dir`. Returns the manifest rows.
pub fn write_toy_dataset(dir: &Path, enc: &BuiltinEncoder, cfg: &ToyConfig, layout: ToyLayout) -> Result<Vec<ManifestRow>> {
    let data = generate_toy(enc, cfg)?;
    let mut rows = Vec::with_capacity(data.videos.len());
    for (i, v) in data.videos.iter().enumerate() {
        let split = layout.tag(v.class_id, i % cfg.items_per_class, cfg.items_per_class, cfg.num_classes)?;
        let rel = format!("media/{}.json", v.id);
        write_media_file(
            &dir.join(&rel),
            &MediaFile {
                frames: v.frames.iter().map(|f| f.to_vec()).collect(),
            },
        )?;
        rows.push(ManifestRow {
            id: v.id.clone(),
            class_name: data.class_names[v.class_id].clone(),
            split: split.to_string(),
            media: MediaRef::Frames(FrameMedia {
                path: rel,
                frames: v.frames.len(),
            }),
        });
    }
    save_manifest(&dir.join(MANIFEST_FILE), &rows)?;
    Ok(rows)
}
