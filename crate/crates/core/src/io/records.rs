//! Run records, per-epoch run logs and the report table.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::atomic::write_atomic;
use crate::protocol::{Paradigm, RunRecord};
use crate::train::TrainOutcome;

pub const RUN_RECORD_FILE: &str = "run_record.json";
pub const RUN_LOG_FILE: &str = "run_log.jsonl";

pub fn encode_run_record(record: &RunRecord) -> String {
    let mut s = serde_json::to_string_pretty(record).expect("run records serialize");
    s.push('\n');
    s
}

pub fn save_run_record(path: &Path, record: &RunRecord) -> Result<()> {
    write_atomic(path, encode_run_record(record).as_bytes())
}

pub fn load_run_record(path: &Path) -> Result<RunRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunLogLine {
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub selected: bool,
}

pub fn run_log_lines(seed: u64, run: &TrainOutcome) -> Vec<RunLogLine> {
    run.history
        .epochs
        .iter()
        .enumerate()
        .map(|(i, e)| RunLogLine {
            seed,
            epoch: e.epoch,
            train_loss: e.train_loss,
            val_accuracy: e.val_accuracy,
            selected: i == run.selected_index,
        })
        .collect()
}

pub fn encode_run_log(lines: &[RunLogLine]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l).expect("log lines serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_run_log(text: &str) -> Result<Vec<RunLogLine>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Every `run_record.json` below `dir`, in path order.
pub fn find_run_records(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&d, e))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == RUN_RECORD_FILE) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub paradigm: Paradigm,
    pub n_way: usize,
    /// `None` when trained on every training item.
    pub k_shot: Option<usize>,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
    pub source: String,
}

pub fn report_rows(dir: &Path) -> Result<Vec<ReportRow>> {
    find_run_records(dir)?
        .into_iter()
        .map(|path| {
            let r = load_run_record(&path)?;
            let source = path
                .parent()
                .and_then(|p| p.strip_prefix(dir).ok())
                .map(|p| p.display().to_string())
                .unwrap_or_default();
            Ok(ReportRow {
                method: r.config.method.label(),
                paradigm: r.config.paradigm,
                n_way: r.config.n_way,
                k_shot: r.config.k_shot,
                mean: r.mean,
                std: r.std,
                seeds: r.seeds.len(),
                source,
            })
        })
        .collect()
}

fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

/// Fixed-width table, accuracies in percent with one decimal.
pub fn render_table(rows: &[ReportRow]) -> String {
    let header = ["method", "paradigm", "way", "shot", "accuracy", "seeds", "run"];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                match r.paradigm {
                    Paradigm::Traditional => "traditional".into(),
                    Paradigm::MetaLearning => "meta_learning".into(),
                },
                r.n_way.to_string(),
                r.k_shot.map_or("all".into(), |k| k.to_string()),
                format!("{} ± {}", pct(r.mean), pct(r.std)),
                r.seeds.to_string(),
                r.source.clone(),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for row in &body {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

pub fn render_json(rows: &[ReportRow]) -> String {
    let mut s = serde_json::to_string_pretty(rows).expect("report rows serialize");
    s.push('\n');
    s
}
