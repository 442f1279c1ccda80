//! Line-delimited JSON dataset manifests.
//!
//! One object per line:
//!
//! ```text
//! {"id":"c0-v000","class_name":"open door","split":"train","media":{"path":"media/c0-v000.json","frames":4}}
//! {"id":"clip-17","class_name":"lift box","split":"meta_test","media":{"key":"clip-17"}}
//! ```
//!
//! Split tags are `train`/`val`/`test` for the traditional paradigm and
//! `meta_train`/`meta_val`/`meta_test` for the meta-learning paradigm; one
//! manifest uses one paradigm. Class ids follow first appearance.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureCache, FrozenDualEncoder};
use crate::error::{Error, Result};
use crate::io::atomic::write_atomic;
use crate::protocol::{DatasetSplit, Item, Paradigm, Phase};
use crate::tokens::{ClassEntry, ClassSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameMedia {
    /// Relative to the manifest's directory.
    pub path: String,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyMedia {
    pub key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MediaRef {
    Frames(FrameMedia),
    Key(KeyMedia),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub id: String,
    pub class_name: String,
    pub split: String,
    pub media: MediaRef,
}

impl ManifestRow {
    /// Key of this row's embedding in a feature cache.
    pub fn cache_key(&self) -> &str {
        match &self.media {
            MediaRef::Frames(_) => &self.id,
            MediaRef::Key(k) => &k.key,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Meta(Phase),
}

impl SplitTag {
    pub fn parse(tag: &str) -> Option<Self> {
        Some(match tag {
            "train" => SplitTag::Train,
            "val" => SplitTag::Val,
            "test" => SplitTag::Test,
            "meta_train" => SplitTag::Meta(Phase::MetaTrain),
            "meta_val" => SplitTag::Meta(Phase::MetaVal),
            "meta_test" => SplitTag::Meta(Phase::MetaTest),
            _ => return None,
        })
    }

    pub fn paradigm(self) -> Paradigm {
        match self {
            SplitTag::Meta(_) => Paradigm::MetaLearning,
            _ => Paradigm::Traditional,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Class names by id.
    pub class_names: Vec<String>,
    /// `None` for an empty manifest.
    pub paradigm: Option<Paradigm>,
}

impl Manifest {
    pub fn from_rows(rows: Vec<ManifestRow>) -> Result<Self> {
        build(rows.into_iter().enumerate().map(|(i, r)| (i + 1, r)).collect())
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    pub fn tag(&self, row: &ManifestRow) -> SplitTag {
        SplitTag::parse(&row.split).expect("validated on load")
    }

    pub fn class_set(&self, enc: &dyn FrozenDualEncoder) -> Result<ClassSet> {
        ClassSet::new(
            self.class_names
                .iter()
                .enumerate()
                .map(|(i, n)| {
                    Ok(ClassEntry {
                        class_id: i,
                        name_text: n.clone(),
                        name_tokens: enc.tokenize(n)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        )
    }

    /// Items of every row, with embeddings from `cache`.
    pub fn items(&self, cache: &FeatureCache) -> Result<Vec<(SplitTag, Item)>> {
        self.rows
            .iter()
            .map(|row| {
                let key = row.cache_key();
                let values = cache
                    .get(key)
                    .ok_or_else(|| Error::Integrity(format!("no cached features for {key:?} (item {:?})", row.id)))?;
                Ok((
                    self.tag(row),
                    Item {
                        id: row.id.clone(),
                        label: self.class_id(&row.class_name).expect("indexed on load"),
                        embedding: values.iter().map(|&v| v as f64).collect(),
                    },
                ))
            })
            .collect()
    }

    pub fn dataset_split(&self, cache: &FeatureCache) -> Result<DatasetSplit> {
        let items = self.items(cache)?;
        match self.paradigm {
            None => Err(Error::EmptyInput("manifest has no rows".into())),
            Some(Paradigm::Traditional) => {
                let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
                for (tag, item) in items {
                    match tag {
                        SplitTag::Train => train.push(item),
                        SplitTag::Val => val.push(item),
                        _ => test.push(item),
                    }
                }
                DatasetSplit::traditional(train, val, test)
            }
            Some(Paradigm::MetaLearning) => {
                let mut partitions: BTreeMap<Phase, BTreeSet<usize>> = BTreeMap::new();
                let mut out = Vec::with_capacity(items.len());
                for (tag, item) in items {
                    if let SplitTag::Meta(phase) = tag {
                        partitions.entry(phase).or_default().insert(item.label);
                    }
                    out.push(item);
                }
                DatasetSplit::meta_learning(
                    partitions
                        .into_iter()
                        .map(|(p, s)| (p, s.into_iter().collect()))
                        .collect(),
                    out,
                )
            }
        }
    }
}

fn build(rows: Vec<(usize, ManifestRow)>) -> Result<Manifest> {
    let mut ids = BTreeSet::new();
    let mut class_names: Vec<String> = Vec::new();
    let mut paradigm: Option<Paradigm> = None;
    let mut out = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        if row.id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty id".into(),
            });
        }
        if row.class_name.trim().is_empty() {
            return Err(Error::Parse {
                line,
                message: format!("item {:?} has an empty class_name", row.id),
            });
        }
        let tag = SplitTag::parse(&row.split).ok_or_else(|| Error::Parse {
            line,
            message: format!("unknown split tag {:?}", row.split),
        })?;
        match paradigm {
            None => paradigm = Some(tag.paradigm()),
            Some(p) if p != tag.paradigm() => {
                return Err(Error::Integrity(format!(
                    "line {line}: split {:?} mixes paradigms in one manifest",
                    row.split
                )))
            }
            _ => {}
        }
        if let MediaRef::Frames(f) = &row.media {
            if f.frames == 0 {
                return Err(Error::Parse {
                    line,
                    message: format!("item {:?} declares zero frames", row.id),
                });
            }
        }
        if !ids.insert(row.id.clone()) {
            return Err(Error::Integrity(format!("line {line}: duplicate id {:?}", row.id)));
        }
        if !class_names.contains(&row.class_name) {
            class_names.push(row.class_name.clone());
        }
        out.push(row);
    }
    Ok(Manifest {
        rows: out,
        class_names,
        paradigm,
    })
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push((i + 1, row));
    }
    build(rows)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn write_manifest(rows: &[ManifestRow]) -> String {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("manifest rows serialize"));
        out.push('\n');
    }
    out
}

pub fn save_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    write_atomic(path, write_manifest(rows).as_bytes())
}
