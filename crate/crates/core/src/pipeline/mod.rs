//! The two-stage diagnosis orchestrator.
//!
//! Per image: normalize to the stage-1 square, detect ROIs, keep boxes at or
//! above the confidence threshold, and either short-circuit to healthy (no
//! boxes) or classify the diagnostic square of every kept box and take the
//! majority vote.

pub mod results;
pub mod vote;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    roi_ref, BackendError, BackendKind, Classifier, ClassifierOutput, ClassifyRequest, DetectRequest, Detector,
};
use crate::dataset::{Manifest, ManifestEntry};
use crate::imaging::{extract_and_resize, preprocess_stage1, ImageBuffer, PipelineGeometry, RoiBox, Window};
use crate::taxonomy::{ClassId, Crop, CropTaxonomy};

pub use results::{read_results, write_results, BatchSummary, ResultsError, ResultsFile};
pub use vote::{majority_vote, Vote, VoteError};

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{kind} backend is bound to {backend}, pipeline is configured for {pipeline}")]
    CropMismatch { kind: BackendKind, backend: Crop, pipeline: Crop },
    #[error("backend passed as {expected} declares itself a {found}")]
    KindMismatch { expected: BackendKind, found: BackendKind },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub geometry: PipelineGeometry,
    pub detector_conf_threshold: f64,
    pub crop: Crop,
    /// `None` classifies every kept box.
    pub max_rois: Option<usize>,
    /// Wall-clock timings make results non-reproducible, so they are opt-in.
    #[serde(default)]
    pub record_timing: bool,
}

impl PipelineConfig {
    pub fn new(crop: Crop) -> Self {
        Self {
            geometry: PipelineGeometry::default(),
            detector_conf_threshold: DEFAULT_CONF_THRESHOLD,
            crop,
            max_rois: None,
            record_timing: false,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.geometry.validate().map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.detector_conf_threshold) {
            return Err(PipelineError::InvalidConfig(format!(
                "detector_conf_threshold {} outside [0,1]",
                self.detector_conf_threshold
            )));
        }
        if self.max_rois == Some(0) {
            return Err(PipelineError::InvalidConfig("max_rois must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionPath {
    NoRoiHealthy,
    MajorityVote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Load,
    Detect,
    Classify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordError {
    pub stage: Stage,
    pub kind: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<usize>,
}

impl RecordError {
    fn backend(stage: Stage, roi: Option<usize>, e: &BackendError) -> Self {
        Self { stage, kind: e.kind_name().to_string(), message: e.to_string(), roi }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiResult {
    #[serde(rename = "box")]
    pub roi: RoiBox,
    pub window: Window,
    pub probs: ClassifierOutput,
    pub argmax: ClassId,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingMs {
    pub preprocess: Option<f64>,
    pub detect: Option<f64>,
    pub classify_total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisRecord {
    pub image_id: String,
    pub source_size: Option<[u32; 2]>,
    pub preprocessed_size: Option<u32>,
    /// The short-edge square was smaller than the stage-1 size.
    pub upscaled: bool,
    /// Boxes returned by the detector before threshold and truncation.
    pub boxes_detected: usize,
    pub final_label_id: Option<ClassId>,
    pub final_label_code: Option<String>,
    pub decision_path: Option<DecisionPath>,
    pub rois: Vec<RoiResult>,
    pub tie_broken: bool,
    pub errors: Vec<RecordError>,
    pub timing_ms: TimingMs,
}

impl DiagnosisRecord {
    fn empty(image_id: &str) -> Self {
        Self {
            image_id: image_id.to_string(),
            source_size: None,
            preprocessed_size: None,
            upscaled: false,
            boxes_detected: 0,
            final_label_id: None,
            final_label_code: None,
            decision_path: None,
            rois: Vec::new(),
            tie_broken: false,
            errors: Vec::new(),
            timing_ms: TimingMs::default(),
        }
    }

    pub fn failed(image_id: &str, error: RecordError) -> Self {
        let mut r = Self::empty(image_id);
        r.errors.push(error);
        r
    }

    pub fn is_scored(&self) -> bool {
        self.errors.is_empty() && self.final_label_id.is_some()
    }
}

/// Boxes at or above `threshold`, strongest first (stable for equal
/// confidences), truncated to `max_rois`.
pub fn select_rois(boxes: &[RoiBox], threshold: f64, max_rois: Option<usize>) -> Vec<RoiBox> {
    let mut kept: Vec<RoiBox> = boxes.iter().copied().filter(|b| b.confidence >= threshold).collect();
    kept.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    if let Some(n) = max_rois {
        kept.truncate(n);
    }
    kept
}

/// Supplies decoded images for manifest entries.
pub trait ImageSource: Sync {
    fn load(&self, entry: &ManifestEntry) -> Result<ImageBuffer, String>;
}

/// Reads entry paths from disk relative to the manifest directory.
pub struct FileImageSource<'a> {
    manifest: &'a Manifest,
}

impl<'a> FileImageSource<'a> {
    pub fn new(manifest: &'a Manifest) -> Self {
        Self { manifest }
    }
}

impl ImageSource for FileImageSource<'_> {
    fn load(&self, entry: &ManifestEntry) -> Result<ImageBuffer, String> {
        let path = self.manifest.resolve_path(entry);
        ImageBuffer::open(&path).map_err(|e| format!("{}: {e}", path.display()))
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

pub struct Pipeline<'a> {
    config: PipelineConfig,
    taxonomy: &'a CropTaxonomy,
    detector: &'a dyn Detector,
    classifier: &'a dyn Classifier,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        config: PipelineConfig,
        taxonomy: &'a CropTaxonomy,
        detector: &'a dyn Detector,
        classifier: &'a dyn Classifier,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        if taxonomy.crop != config.crop {
            return Err(PipelineError::InvalidConfig(format!(
                "taxonomy is for {}, config for {}",
                taxonomy.crop, config.crop
            )));
        }
        for (expected, d) in
            [(BackendKind::Detector, detector.descriptor()), (BackendKind::Classifier, classifier.descriptor())]
        {
            if d.kind != expected {
                return Err(PipelineError::KindMismatch { expected, found: d.kind });
            }
            if d.crop != config.crop {
                return Err(PipelineError::CropMismatch { kind: expected, backend: d.crop, pipeline: config.crop });
            }
        }
        Ok(Self { config, taxonomy, detector, classifier })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn diagnose(&self, image_id: &str, img: &ImageBuffer) -> DiagnosisRecord {
        let timing = self.config.record_timing;
        let geom = &self.config.geometry;
        let mut rec = DiagnosisRecord::empty(image_id);

        let t = Instant::now();
        let pre = preprocess_stage1(img, geom.stage1_size);
        rec.source_size = Some([pre.source_size.0, pre.source_size.1]);
        rec.preprocessed_size = Some(geom.stage1_size);
        rec.upscaled = pre.upscaled;
        if timing {
            rec.timing_ms.preprocess = Some(elapsed_ms(t));
        }

        let t = Instant::now();
        let detected = self
            .detector
            .detect(DetectRequest { image_ref: image_id, image: &pre.image })
            .and_then(|out| out.validate_bounds(geom.stage1_size, geom.stage1_size).map(|_| out));
        if timing {
            rec.timing_ms.detect = Some(elapsed_ms(t));
        }
        let detected = match detected {
            Ok(d) => d,
            Err(e) => {
                rec.errors.push(RecordError::backend(Stage::Detect, None, &e));
                return rec;
            }
        };
        rec.boxes_detected = detected.boxes.len();

        let kept = select_rois(&detected.boxes, self.config.detector_conf_threshold, self.config.max_rois);
        if kept.is_empty() {
            let healthy = self.taxonomy.label(ClassId::HEALTHY).expect("healthy is always present");
            rec.final_label_id = Some(healthy.id);
            rec.final_label_code = Some(healthy.code.clone());
            rec.decision_path = Some(DecisionPath::NoRoiHealthy);
            return rec;
        }

        let t = Instant::now();
        for (index, roi) in kept.iter().enumerate() {
            let (window, patch) = extract_and_resize(&pre.image, roi, geom).expect("validated geometry and bounds");
            let image_ref = roi_ref(image_id, index);
            let out =
                self.classifier.classify(ClassifyRequest { image_ref: &image_ref, image: &patch }).and_then(|d| {
                    if d.len() == self.taxonomy.len() {
                        Ok(d)
                    } else {
                        Err(BackendError::ProtocolViolation(format!(
                            "distribution has {} entries, expected {}",
                            d.len(),
                            self.taxonomy.len()
                        )))
                    }
                });
            match out {
                Ok(probs) => {
                    let argmax = probs.argmax(self.taxonomy);
                    rec.rois.push(RoiResult { roi: *roi, window, probs, argmax });
                }
                Err(e) => {
                    rec.errors.push(RecordError::backend(Stage::Classify, Some(index), &e));
                    break;
                }
            }
        }
        if timing {
            rec.timing_ms.classify_total = Some(elapsed_ms(t));
        }
        if !rec.errors.is_empty() {
            return rec;
        }

        let per_roi: Vec<ClassifierOutput> = rec.rois.iter().map(|r| r.probs.clone()).collect();
        let vote = majority_vote(&per_roi, self.taxonomy).expect("non-empty, length-checked");
        let label = self.taxonomy.label(vote.label).expect("vote returns a crop class");
        rec.final_label_id = Some(label.id);
        rec.final_label_code = Some(label.code.clone());
        rec.decision_path = Some(DecisionPath::MajorityVote);
        rec.tie_broken = vote.tie_broken;
        rec
    }

    fn diagnose_entry(&self, entry: &ManifestEntry, source: &dyn ImageSource) -> DiagnosisRecord {
        match source.load(entry) {
            Ok(img) => self.diagnose(&entry.image_id, &img),
            Err(message) => DiagnosisRecord::failed(
                &entry.image_id,
                RecordError { stage: Stage::Load, kind: "ImageLoad".into(), message, roi: None },
            ),
        }
    }

    /// Diagnoses every entry, fanning out over up to `parallelism` threads.
    /// The returned records are in entry order.
    pub fn run_batch(
        &self,
        entries: &[ManifestEntry],
        source: &dyn ImageSource,
        parallelism: usize,
    ) -> Result<Vec<DiagnosisRecord>, PipelineError> {
        if parallelism <= 1 {
            return Ok(entries.iter().map(|e| self.diagnose_entry(e, source)).collect());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| PipelineError::InvalidConfig(format!("cannot build thread pool: {e}")))?;
        Ok(pool.install(|| entries.par_iter().map(|e| self.diagnose_entry(e, source)).collect()))
    }
}
