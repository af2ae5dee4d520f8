//! Per-image aggregation of per-ROI classifier outputs.

use std::cmp::Ordering;

use thiserror::Error;

use crate::backends::ClassifierOutput;
use crate::taxonomy::{ClassId, CropTaxonomy};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VoteError {
    #[error("majority vote over zero ROIs")]
    EmptyInput,
    #[error("distribution {index} has {found} entries, expected {expected}")]
    LengthMismatch { index: usize, found: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vote {
    pub label: ClassId,
    /// More than one class shared the top argmax count.
    pub tie_broken: bool,
}

/// Order-independent sum: adding the values in sorted order makes the result
/// identical for every permutation of the ROIs.
fn canonical_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().sum()
}

/// Most frequent argmax label across ROIs.
///
/// Count ties go to the tied class with the highest mean probability over
/// all ROIs; remaining ties go to the lowest class id.
pub fn majority_vote(per_roi: &[ClassifierOutput], taxonomy: &CropTaxonomy) -> Result<Vote, VoteError> {
    if per_roi.is_empty() {
        return Err(VoteError::EmptyInput);
    }
    let k = taxonomy.len();
    if let Some((index, d)) = per_roi.iter().enumerate().find(|(_, d)| d.len() != k) {
        return Err(VoteError::LengthMismatch { index, found: d.len(), expected: k });
    }

    let mut counts = vec![0usize; k];
    for d in per_roi {
        counts[d.argmax_index()] += 1;
    }
    let top = *counts.iter().max().expect("k > 0");
    let tied: Vec<usize> = (0..k).filter(|&i| counts[i] == top).collect();
    if let [only] = tied[..] {
        return Ok(Vote { label: taxonomy.id_at(only).expect("index in range"), tie_broken: false });
    }

    // Equal denominators, so comparing sums compares means.
    let mut best = tied[0];
    let mut best_sum = canonical_sum(per_roi.iter().map(|d| d.probs()[best]).collect());
    for &i in &tied[1..] {
        let sum = canonical_sum(per_roi.iter().map(|d| d.probs()[i]).collect());
        if sum.total_cmp(&best_sum) == Ordering::Greater {
            best = i;
            best_sum = sum;
        }
    }
    Ok(Vote { label: taxonomy.id_at(best).expect("index in range"), tie_broken: true })
}
