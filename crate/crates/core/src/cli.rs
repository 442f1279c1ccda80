//! The `nametune` command line.
//!
//! Exit status is 0 on success, 1 when a command fails and 2 on usage errors.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::save_checkpoint;
use crate::classify::{zero_shot_head, PromptSpec, DEFAULT_PROMPT};
use crate::encoder::{EncoderSpec, FeatureCache, FrozenDualEncoder, LinearEncoderConfig, ToyTransformerConfig};
use crate::error::{Error, Result};
use crate::io::atomic::write_atomic;
use crate::io::config::RunConfigFile;
use crate::io::manifest::{load_manifest, SplitTag};
use crate::io::media::build_cache;
use crate::io::records::{
    encode_run_log, render_json, render_table, report_rows, run_log_lines, save_run_record, RUN_LOG_FILE,
    RUN_RECORD_FILE,
};
use crate::io::toyset::{write_toy_dataset, ToyLayout};
use crate::protocol::{evaluate, run_protocol, Paradigm, ProtocolMethod, RunSource};
use crate::tokens::{ClassEntry, ClassSet};
use crate::toy::ToyConfig;
use crate::train::Example;

#[derive(Debug, Parser)]
#[command(name = "nametune", version, about = "Few-shot text-input tuning for frozen dual encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EncoderKind {
    ToyTransformer,
    Linear,
}

#[derive(Debug, Clone, clap::Args)]
pub struct EncoderArgs {
    /// Built-in encoder.
    #[arg(long, value_enum, default_value = "toy-transformer")]
    pub encoder: EncoderKind,
    /// Weight seed; defaults to the encoder's default.
    #[arg(long)]
    pub encoder_seed: Option<u64>,
}

impl EncoderArgs {
    pub fn spec(&self) -> EncoderSpec {
        match self.encoder {
            EncoderKind::ToyTransformer => {
                let mut c = ToyTransformerConfig::default();
                if let Some(s) = self.encoder_seed {
                    c.seed = s;
                }
                EncoderSpec::ToyTransformer(c)
            }
            EncoderKind::Linear => {
                let mut c = LinearEncoderConfig::default();
                if let Some(s) = self.encoder_seed {
                    c.seed = s;
                }
                EncoderSpec::Linear(c)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ToyLayoutArg {
    Traditional,
    Meta,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode every media row of a manifest into a feature cache.
    Cache {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        encoder: EncoderArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot accuracy of a prompt on one split.
    ZeroShot {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, default_value = DEFAULT_PROMPT)]
        prompt: String,
        /// Split tag to evaluate; `test` or `meta_test` by default.
        #[arg(long)]
        split: Option<String>,
        #[command(flatten)]
        encoder: EncoderArgs,
    },
    /// Train text parameters (name_tuning, coop, coop_csc, cona) under a run config.
    Tune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a baseline (linear_probe, vl_prototype, zero_shot) under a run config.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate every run record below a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: ReportFormat,
    },
    /// Write the synthetic toy dataset.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "traditional")]
        layout: ToyLayoutArg,
        #[arg(long, default_value_t = ToyConfig::default().seed)]
        seed: u64,
        #[arg(long, default_value_t = ToyConfig::default().num_classes)]
        classes: usize,
        #[arg(long, default_value_t = ToyConfig::default().items_per_class)]
        items_per_class: usize,
        #[command(flatten)]
        encoder: EncoderArgs,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Runs one command and returns its standard output.
pub fn execute(command: Command) -> Result<String> {
    match command {
        Command::Cache { manifest, encoder, out } => {
            let m = load_manifest(&manifest)?;
            let enc = encoder.spec().build()?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let cache = build_cache(&m, base, &enc, &out)?;
            Ok(format!("cached {} embeddings to {}\n", cache.len(), out.display()))
        }
        Command::ZeroShot {
            manifest,
            cache,
            prompt,
            split,
            encoder,
        } => {
            let report = zero_shot_report(&manifest, &cache, &prompt, split.as_deref(), &encoder.spec())?;
            let mut s = serde_json::to_string_pretty(&report).expect("report serializes");
            s.push('\n');
            Ok(s)
        }
        Command::Tune { config, out } => run_config(&config, &out, true),
        Command::Baseline { config, out } => run_config(&config, &out, false),
        Command::Report { runs, format } => {
            let rows = report_rows(&runs)?;
            if rows.is_empty() {
                return Err(Error::EmptyInput(format!("no {RUN_RECORD_FILE} below {}", runs.display())));
            }
            Ok(match format {
                ReportFormat::Table => render_table(&rows),
                ReportFormat::Json => render_json(&rows),
            })
        }
        Command::Toy {
            out,
            layout,
            seed,
            classes,
            items_per_class,
            encoder,
        } => {
            let enc = encoder.spec().build()?;
            let cfg = ToyConfig {
                seed,
                num_classes: classes,
                items_per_class,
                ..Default::default()
            };
            let layout = match layout {
                ToyLayoutArg::Traditional => ToyLayout::Traditional {
                    train: items_per_class / 3,
                    val: items_per_class / 6,
                },
                ToyLayoutArg::Meta => ToyLayout::MetaLearning {
                    train: classes / 3,
                    val: classes / 3,
                },
            };
            let rows = write_toy_dataset(&out, &enc, &cfg, layout)?;
            Ok(format!("wrote {} items to {}\n", rows.len(), out.display()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZeroShotReport {
    pub split: String,
    pub prompt: String,
    pub encoder: EncoderSpec,
    pub encoder_digest: String,
    pub num_classes: usize,
    pub queries: usize,
    pub accuracy: f64,
}

/// Zero-shot accuracy over the classes present in `split`.
pub fn zero_shot_report(
    manifest: &Path,
    cache: &Path,
    prompt: &str,
    split: Option<&str>,
    spec: &EncoderSpec,
) -> Result<ZeroShotReport> {
    let m = load_manifest(manifest)?;
    let features = FeatureCache::load(cache)?;
    let enc = spec.build()?;
    if features.d_embed() != enc.space().d_embed {
        return Err(Error::Dimension(format!(
            "cache holds {}-d embeddings, encoder produces {}-d",
            features.d_embed(),
            enc.space().d_embed
        )));
    }
    let tag_text = split.map(str::to_string).unwrap_or_else(|| match m.paradigm {
        Some(Paradigm::MetaLearning) => "meta_test".into(),
        _ => "test".into(),
    });
    let tag = SplitTag::parse(&tag_text).ok_or_else(|| Error::config(format!("split: unknown tag {tag_text:?}")))?;
    if m.paradigm.is_some_and(|p| p != tag.paradigm()) {
        return Err(Error::config(format!("split: {tag_text:?} does not occur in this manifest's paradigm")));
    }
    let items: Vec<_> = m.items(&features)?.into_iter().filter(|(t, _)| *t == tag).map(|(_, i)| i).collect();
    if items.is_empty() {
        return Err(Error::EmptyInput(format!("split {tag_text:?} has no items")));
    }
    let present: Vec<usize> = items.iter().map(|i| i.label).collect::<BTreeSet<_>>().into_iter().collect();
    let classes = ClassSet::new(
        present
            .iter()
            .enumerate()
            .map(|(local, &global)| {
                let name = &m.class_names[global];
                Ok(ClassEntry {
                    class_id: local,
                    name_text: name.clone(),
                    name_tokens: enc.tokenize(name)?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
    )?;
    let queries: Vec<Example> = items
        .iter()
        .map(|i| Example::new(i.embedding.clone(), present.binary_search(&i.label).expect("present")))
        .collect();
    let head = zero_shot_head(&enc, &PromptSpec::new(prompt, &enc)?, &classes)?;
    Ok(ZeroShotReport {
        split: tag_text,
        prompt: prompt.to_string(),
        encoder: spec.clone(),
        encoder_digest: enc.weight_digest(),
        num_classes: classes.len(),
        queries: queries.len(),
        accuracy: evaluate(&head, &queries)?,
    })
}

fn run_config(config: &Path, out: &Path, tuning: bool) -> Result<String> {
    let run = RunConfigFile::load(config)?;
    let method = run.file.method;
    if tuning != method.is_tuning() {
        let expected = if tuning {
            "name_tuning, coop, coop_csc or cona"
        } else {
            "linear_probe, vl_prototype or zero_shot"
        };
        return Err(Error::config(format!("method: {method:?} is not one of {expected}")));
    }
    let enc = run.file.encoder.build()?;
    let manifest = load_manifest(&run.manifest_path)?;
    let features = FeatureCache::load(&run.cache_path)?;
    let split = manifest.dataset_split(&features)?;
    let classes = manifest.class_set(&enc)?;
    let outcome = run_protocol(&split, &run.protocol, &enc, &classes)?;

    let mut record = outcome.record;
    record.source = Some(RunSource {
        manifest: run.file.manifest.display().to_string(),
        cache: run.file.cache.display().to_string(),
        encoder: run.file.encoder.clone(),
    });
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if let ProtocolMethod::Tune(_) = run.protocol.method {
        let ckpt_dir = out.join("checkpoints");
        let mut log = Vec::new();
        for (seed, r) in &outcome.runs {
            log.extend(run_log_lines(*seed, r));
            save_checkpoint(
                &ckpt_dir.join(format!("seed_{seed}.ntpc")),
                &r.selected,
                r.selected_epoch() as u32,
                *seed,
            )?;
        }
        write_atomic(&out.join(RUN_LOG_FILE), encode_run_log(&log).as_bytes())?;
    }
    save_run_record(&out.join(RUN_RECORD_FILE), &record)?;
    Ok(format!(
        "{}: {:.1} ± {:.1} over {} seeds, written to {}\n",
        run.protocol.method.label(),
        record.mean * 100.0,
        record.std * 100.0,
        record.seeds.len(),
        out.display()
    ))
}
