//! Plain-text comparison table and the machine-readable evaluation report.

use serde::{Deserialize, Serialize};

use super::{ConfusionMatrix, MetricsReport};
use crate::taxonomy::Crop;

pub const COLUMNS: [&str; 4] = ["F1-score (Healthy)", "Avg. F1-score (Diseases)", "Macro F1-score", "Micro Accuracy"];

/// Full-precision evaluation output of one model on one crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub crop: Crop,
    pub model: String,
    pub scored: u64,
    pub errored: usize,
    pub metrics: MetricsReport,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub crop: Crop,
    pub model: String,
    pub metrics: MetricsReport,
}

impl From<&EvalReport> for ReportRow {
    fn from(r: &EvalReport) -> Self {
        Self { crop: r.crop, model: r.model.clone(), metrics: r.metrics.clone() }
    }
}

/// A fraction as tenths of a percent, rounded half-up.
fn tenths(x: f64) -> i64 {
    // absorbs representation error such as 0.8425 * 1000 = 842.4999...
    (x * 1000.0 + 0.5 + 1e-9).floor() as i64
}

/// Renders a fraction as a percentage with one decimal, e.g. `0.804 -> "80.4"`.
pub fn format_percent(x: f64) -> String {
    let t = tenths(x);
    format!("{}.{}", t / 10, t % 10)
}

fn values(m: &MetricsReport) -> [f64; 4] {
    [m.healthy_f1, m.avg_disease_f1, m.macro_f1, m.micro_accuracy]
}

/// One row per (crop, model), crops in canonical order and models in input
/// order. `*` marks the best displayed value of each column within a crop;
/// equal values are all marked.
pub fn render_report(rows: &[ReportRow]) -> String {
    let mut ordered: Vec<&ReportRow> = rows.iter().collect();
    ordered.sort_by_key(|r| r.crop);

    let mut table: Vec<[String; 6]> = Vec::with_capacity(ordered.len());
    let mut i = 0;
    while i < ordered.len() {
        let crop = ordered[i].crop;
        let group: Vec<&ReportRow> = ordered[i..].iter().take_while(|r| r.crop == crop).copied().collect();
        let best: Vec<i64> = (0..4)
            .map(|c| group.iter().map(|r| tenths(values(&r.metrics)[c])).max().expect("non-empty group"))
            .collect();
        for (j, r) in group.iter().enumerate() {
            let target = if j == 0 {
                format!("{} ({} class)", crop.display_name(), r.metrics.per_class_f1.len())
            } else {
                String::new()
            };
            let cells: Vec<String> = values(&r.metrics)
                .iter()
                .enumerate()
                .map(|(c, &v)| {
                    let mark = if tenths(v) == best[c] { "*" } else { "" };
                    format!("{}{mark}", format_percent(v))
                })
                .collect();
            table.push([
                target,
                r.model.clone(),
                cells[0].clone(),
                cells[1].clone(),
                cells[2].clone(),
                cells[3].clone(),
            ]);
        }
        i += group.len();
    }

    let header = ["Target", "Model", COLUMNS[0], COLUMNS[1], COLUMNS[2], COLUMNS[3]];
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &table {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[&str]| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| if c < 2 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string()
    };

    let mut out = String::new();
    out.push_str(&line(&header));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in &table {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        out.push_str(&line(&cells));
        out.push('\n');
    }
    out.push_str("values in %; * = best in column for the crop\n");
    for r in &ordered {
        if !r.metrics.zero_support.is_empty() {
            let ids: Vec<String> = r.metrics.zero_support.iter().map(|c| c.to_string()).collect();
            out.push_str(&format!(
                "note: {} / {}: classes without support scored as 0: {}\n",
                r.crop.display_name(),
                r.model,
                ids.join(", ")
            ));
        }
    }
    out
}
