//! Confusion matrices and the four headline scores: healthy F1, mean disease
//! F1, macro F1 and micro accuracy.
//!
//! Per-class F1 is one-vs-rest, `2·TP / (2·TP + FP + FN)`. Means always run
//! over the full class list of the matrix, not only the classes that occur.
//! A class with `TP + FP + FN = 0` scores 0 and is listed in
//! [`MetricsReport::zero_support`].

pub mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::DiagnosisRecord;
use crate::taxonomy::{ClassId, Crop, CropTaxonomy};

pub use report::{format_percent, render_report, EvalReport, ReportRow};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("image `{0}` is not in the manifest")]
    UnknownImageId(String),
    #[error("label {label} for image `{image_id}` is not in the class list")]
    LabelOutOfTaxonomy { image_id: String, label: ClassId },
    #[error("class {0} is not in the class list")]
    UnknownClass(ClassId),
    #[error("class list must contain healthy (0) plus at least one other unique class")]
    InvalidClasses,
    #[error("cannot merge matrices over different class lists")]
    IncompatibleMerge,
}

/// Square count matrix: rows are ground truth, columns predictions, both in
/// class-id order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub crop: Option<Crop>,
    classes: Vec<ClassId>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(taxonomy: &CropTaxonomy) -> Self {
        let mut m = Self::with_classes(taxonomy.ids()).expect("crop taxonomies contain healthy");
        m.crop = Some(taxonomy.crop);
        m
    }

    pub fn with_classes(mut classes: Vec<ClassId>) -> Result<Self, MetricsError> {
        classes.sort();
        classes.dedup();
        if classes.len() < 2 || classes[0] != ClassId::HEALTHY {
            return Err(MetricsError::InvalidClasses);
        }
        let k = classes.len();
        Ok(Self { crop: None, classes, counts: vec![0; k * k] })
    }

    /// Builds from a row-major `counts[truth][pred]` table.
    pub fn from_rows(classes: Vec<ClassId>, rows: &[Vec<u64>]) -> Result<Self, MetricsError> {
        let mut m = Self::with_classes(classes)?;
        let k = m.k();
        if rows.len() != k || rows.iter().any(|r| r.len() != k) {
            return Err(MetricsError::InvalidClasses);
        }
        for (i, row) in rows.iter().enumerate() {
            m.counts[i * k..(i + 1) * k].copy_from_slice(row);
        }
        Ok(m)
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    fn index(&self, id: ClassId) -> Result<usize, MetricsError> {
        self.classes.binary_search(&id).map_err(|_| MetricsError::UnknownClass(id))
    }

    pub fn add(&mut self, truth: ClassId, pred: ClassId) -> Result<(), MetricsError> {
        let (t, p) = (self.index(truth)?, self.index(pred)?);
        let k = self.k();
        self.counts[t * k + p] += 1;
        Ok(())
    }

    pub fn get(&self, truth: ClassId, pred: ClassId) -> u64 {
        match (self.index(truth), self.index(pred)) {
            (Ok(t), Ok(p)) => self.counts[t * self.k() + p],
            _ => 0,
        }
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k()).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i * self.k() + i]).sum()
    }

    /// Elementwise sum; matrices from parallel shards combine this way.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if self.classes != other.classes {
            return Err(MetricsError::IncompatibleMerge);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Matrix plus the records that could not be scored.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulation {
    pub matrix: ConfusionMatrix,
    pub errored: usize,
}

impl Accumulation {
    /// Correct predictions over every record, counting errored ones as wrong.
    pub fn all_records_accuracy(&self) -> Option<f64> {
        let n = self.matrix.total() + self.errored as u64;
        (n > 0).then(|| self.matrix.trace() as f64 / n as f64)
    }
}

/// Tallies error-free records into a matrix keyed by `truth`.
pub fn accumulate(
    records: &[DiagnosisRecord],
    truth: &BTreeMap<String, ClassId>,
    taxonomy: &CropTaxonomy,
) -> Result<Accumulation, MetricsError> {
    let mut matrix = ConfusionMatrix::new(taxonomy);
    let mut errored = 0;
    for r in records {
        let &t = truth.get(&r.image_id).ok_or_else(|| MetricsError::UnknownImageId(r.image_id.clone()))?;
        let Some(pred) = r.final_label_id.filter(|_| r.errors.is_empty()) else {
            errored += 1;
            continue;
        };
        for label in [t, pred] {
            if !taxonomy.contains(label) {
                return Err(MetricsError::LabelOutOfTaxonomy { image_id: r.image_id.clone(), label });
            }
        }
        matrix.add(t, pred)?;
    }
    Ok(Accumulation { matrix, errored })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_f1: BTreeMap<ClassId, f64>,
    pub healthy_f1: f64,
    pub avg_disease_f1: f64,
    pub macro_f1: f64,
    pub micro_accuracy: f64,
    /// Ground-truth count per class.
    pub support: BTreeMap<ClassId, u64>,
    /// Classes with no true, predicted or missed instances (scored as 0).
    pub zero_support: Vec<ClassId>,
    /// Accuracy with errored records counted as misses, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub all_records_accuracy: Option<f64>,
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let k = cm.k();
    let rows = cm.rows();
    let mut per_class_f1 = BTreeMap::new();
    let mut support = BTreeMap::new();
    let mut zero_support = Vec::new();
    for (i, &id) in cm.classes().iter().enumerate() {
        let tp = rows[i][i];
        let row_sum: u64 = rows[i].iter().sum();
        let col_sum: u64 = rows.iter().map(|r| r[i]).sum();
        let (fn_, fp) = (row_sum - tp, col_sum - tp);
        let denom = 2 * tp + fp + fn_;
        let f1 = if denom == 0 {
            zero_support.push(id);
            0.0
        } else {
            (2 * tp) as f64 / denom as f64
        };
        per_class_f1.insert(id, f1);
        support.insert(id, row_sum);
    }
    let healthy_f1 = per_class_f1[&ClassId::HEALTHY];
    let all: f64 = per_class_f1.values().sum();
    let macro_f1 = all / k as f64;
    let avg_disease_f1 = (all - healthy_f1) / (k - 1) as f64;
    Ok(MetricsReport {
        per_class_f1,
        healthy_f1,
        avg_disease_f1,
        macro_f1,
        micro_accuracy: cm.trace() as f64 / total as f64,
        support,
        zero_support,
        all_records_accuracy: None,
    })
}

/// [`compute_metrics`] plus the all-records accuracy of `acc`.
pub fn compute_accumulated(acc: &Accumulation) -> Result<MetricsReport, MetricsError> {
    let mut r = compute_metrics(&acc.matrix)?;
    r.all_records_accuracy = acc.all_records_accuracy();
    Ok(r)
}
