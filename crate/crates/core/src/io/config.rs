//! TOML run configuration for the `tune` and `baseline` commands.
//!
//! ```toml
//! manifest = "manifest.jsonl"
//! cache = "features.ntfc"
//! method = "name_tuning"
//! paradigm = "traditional"
//! n_way = 5
//! k_shot = 5
//! seeds = [0, 1, 2, 3]
//!
//! [encoder]
//! kind = "toy_transformer"
//! seed = 7
//!
//! [train]
//! epochs = 20
//!
//! [grid]
//! learning_rates = [1e-3, 4e-3]
//! alphas = [0.1]
//! ```
//!
//! Unset values fall back to the method's published defaults. Setting a
//! single `train.learning_rate`, `train.alpha` or `train.l_context` pins the
//! corresponding grid axis unless `[grid]` lists it explicitly. Unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classify::template_prefix;
use crate::encoder::EncoderSpec;
use crate::error::{Error, Result};
use crate::protocol::{Paradigm, ProtocolConfig, ProtocolMethod};
use crate::textparams::Method;
use crate::train::{CheckpointPolicy, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMethod {
    #[serde(alias = "name-tuning")]
    NameTuning,
    Coop,
    #[serde(alias = "coop-csc")]
    CoopCsc,
    Cona,
    #[serde(alias = "linear-probe")]
    LinearProbe,
    #[serde(alias = "vl-prototype")]
    VlPrototype,
    #[serde(alias = "zero-shot")]
    ZeroShot,
}

impl RunMethod {
    pub fn protocol_method(self) -> ProtocolMethod {
        match self {
            RunMethod::NameTuning => ProtocolMethod::Tune(Method::NameTuning),
            RunMethod::Coop => ProtocolMethod::Tune(Method::Coop),
            RunMethod::CoopCsc => ProtocolMethod::Tune(Method::CoopCsc),
            RunMethod::Cona => ProtocolMethod::Tune(Method::Cona),
            RunMethod::LinearProbe => ProtocolMethod::LinearProbe,
            RunMethod::VlPrototype => ProtocolMethod::VlPrototype,
            RunMethod::ZeroShot => ProtocolMethod::ZeroShot,
        }
    }

    pub fn is_tuning(self) -> bool {
        matches!(self.protocol_method(), ProtocolMethod::Tune(_))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub optimizer: Option<OptimizerKind>,
    pub learning_rate: Option<f64>,
    pub alpha: Option<f64>,
    pub l_context: Option<usize>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub ablation_random_names: Option<bool>,
    /// Traditional paradigm only; meta-learning runs keep the final epoch.
    pub checkpoint_policy: Option<CheckpointPolicy>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub learning_rates: Option<Vec<f64>>,
    pub alphas: Option<Vec<f64>>,
    pub context_lengths: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub lambdas: Option<Vec<f64>>,
    pub text_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub manifest: PathBuf,
    pub cache: PathBuf,
    pub method: RunMethod,
    #[serde(default)]
    pub encoder: EncoderSpec,
    pub paradigm: Option<Paradigm>,
    pub n_way: Option<usize>,
    pub k_shot: Option<usize>,
    /// Traditional paradigm: train on the whole training split.
    pub all_shots: Option<bool>,
    pub seeds: Option<Vec<u64>>,
    pub selection_seed: Option<u64>,
    pub prompt_templates: Option<Vec<String>>,
    pub queries_per_class: Option<usize>,
    pub validation_episodes: Option<usize>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub baseline: BaselineSection,
}

/// A validated configuration with paths resolved against the config file's
/// directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRun {
    pub file: RunConfigFile,
    pub manifest_path: PathBuf,
    pub cache_path: PathBuf,
    pub protocol: ProtocolConfig,
}

fn key_error(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::config(format!("{key}: {msg}"))
}

fn check_positive(key: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(key_error(key, "must not be empty"));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(key_error(key, format!("values must be finite and > 0, got {v}")));
    }
    Ok(())
}

fn check_non_negative(key: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(key_error(key, "must not be empty"));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(key_error(key, format!("values must be finite and >= 0, got {v}")));
    }
    Ok(())
}

pub fn parse_run_config(text: &str) -> Result<RunConfigFile> {
    toml::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<ResolvedRun> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file = parse_run_config(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        file.resolve(base)
    }

    pub fn resolve(self, base_dir: &Path) -> Result<ResolvedRun> {
        let method = self.method.protocol_method();
        let paradigm = self.paradigm.unwrap_or(Paradigm::Traditional);
        let mut p = ProtocolConfig::new(paradigm, method);

        if self.method.is_tuning() {
            let t = &self.train;
            if let Some(o) = t.optimizer {
                p.train.optimizer = o;
            }
            if let Some(lr) = t.learning_rate {
                check_non_negative("train.learning_rate", &[lr])?;
                p.train.learning_rate = lr;
                p.grid.learning_rates = vec![lr];
            }
            if let Some(a) = t.alpha {
                check_non_negative("train.alpha", &[a])?;
                p.train.alpha = a;
                p.grid.alphas = vec![a];
            }
            if let Some(l) = t.l_context {
                p.train.l_context = l;
                p.grid.context_lengths = vec![l];
            }
            if let Some(b) = t.batch_size {
                if b == 0 {
                    return Err(key_error("train.batch_size", "must be >= 1"));
                }
                p.train.batch_size = b;
            }
            if let Some(e) = t.epochs {
                if e == 0 {
                    return Err(key_error("train.epochs", "must be >= 1"));
                }
                p.train.epochs = e;
            }
            if let Some(c) = t.checkpoint_policy {
                p.train.checkpoint_policy = c;
            }
            if let Some(r) = t.ablation_random_names {
                p.train.ablation_random_names = r;
            }
            if let Some(v) = &self.grid.learning_rates {
                check_non_negative("grid.learning_rates", v)?;
                p.grid.learning_rates = v.clone();
            }
            if let Some(v) = &self.grid.alphas {
                check_non_negative("grid.alphas", v)?;
                p.grid.alphas = v.clone();
            }
            if let Some(v) = &self.grid.context_lengths {
                if v.is_empty() {
                    return Err(key_error("grid.context_lengths", "must not be empty"));
                }
                p.grid.context_lengths = v.clone();
            }
            if let ProtocolMethod::Tune(m) = method {
                if matches!(m, Method::Coop | Method::CoopCsc) && p.grid.context_lengths.contains(&0) {
                    return Err(key_error("grid.context_lengths", format!("{m} needs context lengths >= 1")));
                }
            }
        } else if self.train != TrainSection::default() || self.grid != GridSection::default() {
            return Err(key_error("train", format!("{:?} does not train text parameters", self.method)));
        }

        if let Some(v) = &self.baseline.lambdas {
            check_positive("baseline.lambdas", v)?;
            p.lambda_grid = v.clone();
        }
        if let Some(v) = &self.baseline.text_weights {
            check_positive("baseline.text_weights", v)?;
            p.text_weight_grid = v.clone();
        }
        if let Some(n) = self.n_way {
            if n == 0 {
                return Err(key_error("n_way", "must be >= 1"));
            }
            p.n_way = n;
        }
        if let Some(k) = self.k_shot {
            if k == 0 {
                return Err(key_error("k_shot", "must be >= 1"));
            }
            p.k_shot = Some(k);
        }
        if self.all_shots == Some(true) {
            if paradigm == Paradigm::MetaLearning {
                return Err(key_error("all_shots", "only applies to the traditional paradigm"));
            }
            p.k_shot = None;
        }
        if let Some(s) = &self.seeds {
            if s.is_empty() {
                return Err(key_error("seeds", "must not be empty"));
            }
            let mut sorted = s.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != s.len() {
                return Err(key_error("seeds", "must be distinct"));
            }
            p.seeds = s.clone();
        }
        if let Some(s) = self.selection_seed {
            p.selection_seed = s;
        }
        if let Some(t) = &self.prompt_templates {
            if t.is_empty() {
                return Err(key_error("prompt_templates", "must not be empty"));
            }
            for template in t {
                template_prefix(template).map_err(|e| key_error("prompt_templates", e))?;
            }
            p.prompt_templates = t.clone();
            p.train.prompt_template = t[0].clone();
        }
        if let Some(q) = self.queries_per_class {
            if q == 0 {
                return Err(key_error("queries_per_class", "must be >= 1"));
            }
            p.queries_per_class = q;
        }
        if let Some(v) = self.validation_episodes {
            if v == 0 {
                return Err(key_error("validation_episodes", "must be >= 1"));
            }
            p.validation_episodes = v;
        }
        Ok(ResolvedRun {
            manifest_path: base_dir.join(&self.manifest),
            cache_path: base_dir.join(&self.cache),
            file: self,
            protocol: p,
        })
    }
}
