//! Results JSONL: one [`DiagnosisRecord`] per line, then a `{"summary":{..}}`
//! line with counts, the effective configuration and the engine version.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DecisionPath, DiagnosisRecord};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub total: usize,
    pub scored: usize,
    pub failed: usize,
    pub healthy_short_circuit: usize,
    pub majority_vote: usize,
    pub tie_broken: usize,
    pub upscaled: usize,
    pub failures_by_kind: BTreeMap<String, usize>,
    pub config: serde_json::Value,
    pub engine_version: String,
}

impl BatchSummary {
    pub fn from_records(records: &[DiagnosisRecord], config: serde_json::Value) -> Self {
        let mut s = BatchSummary {
            total: records.len(),
            scored: 0,
            failed: 0,
            healthy_short_circuit: 0,
            majority_vote: 0,
            tie_broken: 0,
            upscaled: 0,
            failures_by_kind: BTreeMap::new(),
            config,
            engine_version: ENGINE_VERSION.to_string(),
        };
        for r in records {
            if r.is_scored() {
                s.scored += 1;
            } else {
                s.failed += 1;
                let kind = r.errors.first().map(|e| e.kind.clone()).unwrap_or_else(|| "Unknown".into());
                *s.failures_by_kind.entry(kind).or_insert(0) += 1;
            }
            match r.decision_path {
                Some(DecisionPath::NoRoiHealthy) => s.healthy_short_circuit += 1,
                Some(DecisionPath::MajorityVote) => s.majority_vote += 1,
                None => {}
            }
            s.tie_broken += r.tie_broken as usize;
            s.upscaled += r.upscaled as usize;
        }
        s
    }
}

#[derive(Serialize, Deserialize)]
struct SummaryLine {
    summary: BatchSummary,
}

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("results I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("results line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsFile {
    pub records: Vec<DiagnosisRecord>,
    pub summary: Option<BatchSummary>,
}

pub fn write_results<W: Write>(out: W, records: &[DiagnosisRecord], summary: &BatchSummary) -> std::io::Result<()> {
    let mut w = BufWriter::new(out);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    serde_json::to_writer(&mut w, &SummaryLine { summary: summary.clone() })?;
    w.write_all(b"\n")?;
    w.flush()
}

pub fn write_results_file(
    path: impl AsRef<Path>,
    records: &[DiagnosisRecord],
    summary: &BatchSummary,
) -> std::io::Result<()> {
    write_results(std::fs::File::create(path)?, records, summary)
}

pub fn parse_results(text: &str) -> Result<ResultsFile, ResultsError> {
    let mut records = Vec::new();
    let mut summary = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| ResultsError::Parse { line: i + 1, message: e.to_string() })?;
        let parse_err = |e: serde_json::Error| ResultsError::Parse { line: i + 1, message: e.to_string() };
        if value.get("summary").is_some() {
            summary = Some(serde_json::from_value::<SummaryLine>(value).map_err(parse_err)?.summary);
        } else {
            records.push(serde_json::from_value(value).map_err(parse_err)?);
        }
    }
    Ok(ResultsFile { records, summary })
}

pub fn read_results(path: impl AsRef<Path>) -> Result<ResultsFile, ResultsError> {
    parse_results(&std::fs::read_to_string(path)?)
}
