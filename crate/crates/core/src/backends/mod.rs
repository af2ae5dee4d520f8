//! Detector and classifier interfaces plus the two transports behind them.
//!
//! `scripted` answers from fixture maps in-process; `subprocess` speaks the
//! line-delimited JSON protocol in [`protocol`] to a child process. Whatever
//! the transport, replies are validated before they are handed back: a
//! [`DetectorOutput`] only holds well-formed boxes inside the image and a
//! [`ClassifierOutput`] is always a normalized distribution of the crop's
//! class count.

pub mod protocol;
pub mod scripted;
pub mod subprocess;

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{ImageBuffer, RoiBox};
use crate::taxonomy::{ClassId, Crop, CropTaxonomy};

pub use scripted::{ScriptedClassifier, ScriptedDetector};
pub use subprocess::{SubprocessBackend, SubprocessClassifier, SubprocessDetector};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Allowed deviation of a distribution's sum from 1 before it is rejected.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "message")]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("request timed out after {0} ms")]
    Timeout(u64),
    #[error("backend reported an error: {0}")]
    Remote(String),
    #[error("no fixture entry for `{0}`")]
    MissingFixture(String),
    #[error("failed to hand image to backend: {0}")]
    Io(String),
}

impl BackendError {
    pub fn kind_name(&self) -> &'static str {
        match self {
            BackendError::BackendUnavailable(_) => "BackendUnavailable",
            BackendError::ProtocolViolation(_) => "ProtocolViolation",
            BackendError::Timeout(_) => "Timeout",
            BackendError::Remote(_) => "Remote",
            BackendError::MissingFixture(_) => "MissingFixture",
            BackendError::Io(_) => "Io",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Detector,
    Classifier,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::Detector => "detector",
            BackendKind::Classifier => "classifier",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Concurrency {
    Serial,
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Transport {
    Scripted { fixture: FixtureSource },
    Subprocess { command: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FixtureSource {
    File(PathBuf),
    Inline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub crop: Crop,
    pub transport: Transport,
    pub concurrency: Concurrency,
}

/// Boxes returned by stage 1.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectorOutput {
    pub boxes: Vec<RoiBox>,
}

impl DetectorOutput {
    /// Checks every box lies inside a `width`x`height` frame.
    pub fn validate_bounds(&self, width: u32, height: u32) -> Result<(), BackendError> {
        for (i, b) in self.boxes.iter().enumerate() {
            if !b.fits_within(width, height) {
                return Err(BackendError::ProtocolViolation(format!(
                    "box {i} ({},{})-({},{}) exceeds the {width}x{height} image",
                    b.x_min, b.y_min, b.x_max, b.y_max
                )));
            }
        }
        Ok(())
    }
}

/// Probability distribution over a crop's classes, in class-id order.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ClassifierOutput {
    probs: Vec<f64>,
}

impl ClassifierOutput {
    /// Validates length, range and normalization; renormalizes sums that are
    /// within [`DISTRIBUTION_TOLERANCE`] of 1.
    pub fn new(probs: Vec<f64>, expected_len: usize) -> Result<Self, BackendError> {
        if probs.len() != expected_len {
            return Err(BackendError::ProtocolViolation(format!(
                "distribution has {} entries, expected {expected_len}",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(BackendError::ProtocolViolation(format!("probability {p} outside [0,1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(BackendError::ProtocolViolation(format!("distribution sums to {sum}")));
        }
        let probs = if sum == 1.0 { probs } else { probs.into_iter().map(|p| p / sum).collect() };
        Ok(Self { probs })
    }

    pub fn one_hot(index: usize, len: usize) -> Self {
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability; the lowest index wins exact ties.
    pub fn argmax_index(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn argmax(&self, taxonomy: &CropTaxonomy) -> ClassId {
        taxonomy.id_at(self.argmax_index()).expect("distribution length matches taxonomy")
    }
}

impl<'de> Deserialize<'de> for ClassifierOutput {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let probs = Vec::<f64>::deserialize(d)?;
        let n = probs.len();
        ClassifierOutput::new(probs, n).map_err(serde::de::Error::custom)
    }
}

/// Stage-1 request: the preprocessed square image.
#[derive(Debug, Clone, Copy)]
pub struct DetectRequest<'a> {
    pub image_ref: &'a str,
    pub image: &'a ImageBuffer,
}

/// Stage-2 request: one resized diagnostic square.
#[derive(Debug, Clone, Copy)]
pub struct ClassifyRequest<'a> {
    pub image_ref: &'a str,
    pub image: &'a ImageBuffer,
}

pub trait Detector: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;
    fn detect(&self, request: DetectRequest<'_>) -> Result<DetectorOutput, BackendError>;
}

pub trait Classifier: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;
    fn classify(&self, request: ClassifyRequest<'_>) -> Result<ClassifierOutput, BackendError>;
}

/// Reference string for the `index`-th classified ROI of an image.
///
/// Scripted classifier fixtures and subprocess hand-off files are keyed by it.
pub fn roi_ref(image_id: &str, index: usize) -> String {
    format!("{image_id}.roi{index}")
}

/// Splits `"<image>.roi<k>"` back into the image id.
pub fn image_id_of_ref(image_ref: &str) -> Option<&str> {
    let (base, suffix) = image_ref.rsplit_once(".roi")?;
    (!suffix.is_empty() && suffix.bytes().all(|b| b.is_ascii_digit())).then_some(base)
}
