//! Fixture-driven backends.
//!
//! Detector fixture: `{"img_3": [{"x_min":..,"y_min":..,"x_max":..,"y_max":..,"confidence":..}], "img_7": []}`.
//! Classifier fixture: `{"img_3.roi0": 3, "img_4": [0.1, 0.7, 0.1, 0.1]}`; an
//! integer is a one-hot class id, an array is a full distribution.
//!
//! Lookup tries the exact reference, then the owning image id (for ROI
//! references), then the `"*"` entry. Keys are compared after
//! [`file_stem_for`] normalization so the same fixture behaves identically
//! when served through a subprocess.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::Deserialize;
use thiserror::Error;

use super::protocol::file_stem_for;
use super::{
    image_id_of_ref, BackendDescriptor, BackendError, BackendKind, Classifier, ClassifierOutput, ClassifyRequest,
    Concurrency, DetectRequest, Detector, DetectorOutput, FixtureSource, Transport,
};
use crate::imaging::RoiBox;
use crate::taxonomy::{ClassId, CropTaxonomy};

pub const WILDCARD: &str = "*";

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("failed to read fixture {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed fixture: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("fixture entry `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum ClassEntry {
    OneHot(ClassId),
    Distribution(Vec<f64>),
}

/// Keyed fixture table with the shared lookup rule.
#[derive(Debug, Clone)]
pub struct FixtureTable<T> {
    entries: HashMap<String, T>,
}

impl<T> FixtureTable<T> {
    pub fn new(entries: impl IntoIterator<Item = (String, T)>) -> Self {
        Self {
            entries: entries.into_iter().map(|(k, v)| (if k == WILDCARD { k } else { file_stem_for(&k) }, v)).collect(),
        }
    }

    pub fn lookup(&self, image_ref: &str) -> Option<&T> {
        let key = file_stem_for(image_ref);
        self.entries
            .get(&key)
            .or_else(|| image_id_of_ref(&key).and_then(|id| self.entries.get(id)))
            .or_else(|| self.entries.get(WILDCARD))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn read(path: &Path) -> Result<String, FixtureError> {
    std::fs::read_to_string(path).map_err(|source| FixtureError::Io { path: path.display().to_string(), source })
}

pub fn parse_detector_fixture(json: &str) -> Result<FixtureTable<Vec<RoiBox>>, FixtureError> {
    let raw: HashMap<String, Vec<RoiBox>> = serde_json::from_str(json)?;
    Ok(FixtureTable::new(raw))
}

pub fn parse_classifier_fixture(
    json: &str,
    taxonomy: &CropTaxonomy,
) -> Result<FixtureTable<ClassifierOutput>, FixtureError> {
    let raw: HashMap<String, ClassEntry> = serde_json::from_str(json)?;
    let n = taxonomy.len();
    let mut entries = Vec::with_capacity(raw.len());
    for (key, entry) in raw {
        let out = match entry {
            ClassEntry::OneHot(id) => {
                let idx = taxonomy.index_of(id).ok_or_else(|| FixtureError::Invalid {
                    key: key.clone(),
                    reason: format!("class {id} is not in the {} taxonomy", taxonomy.crop),
                })?;
                ClassifierOutput::one_hot(idx, n)
            }
            ClassEntry::Distribution(probs) => ClassifierOutput::new(probs, n)
                .map_err(|e| FixtureError::Invalid { key: key.clone(), reason: e.to_string() })?,
        };
        entries.push((key, out));
    }
    Ok(FixtureTable::new(entries))
}

/// Detector that replays boxes from a fixture table.
#[derive(Debug)]
pub struct ScriptedDetector {
    descriptor: BackendDescriptor,
    table: FixtureTable<Vec<RoiBox>>,
    calls: AtomicUsize,
}

impl ScriptedDetector {
    pub fn new(crop: crate::taxonomy::Crop, table: FixtureTable<Vec<RoiBox>>, source: FixtureSource) -> Self {
        Self {
            descriptor: BackendDescriptor {
                kind: BackendKind::Detector,
                crop,
                transport: Transport::Scripted { fixture: source },
                concurrency: Concurrency::Parallel,
            },
            table,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_entries(crop: crate::taxonomy::Crop, entries: impl IntoIterator<Item = (String, Vec<RoiBox>)>) -> Self {
        Self::new(crop, FixtureTable::new(entries), FixtureSource::Inline)
    }

    pub fn load(crop: crate::taxonomy::Crop, path: impl AsRef<Path>) -> Result<Self, FixtureError> {
        let path = path.as_ref();
        let table = parse_detector_fixture(&read(path)?)?;
        Ok(Self::new(crop, table, FixtureSource::File(path.to_path_buf())))
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Detector for ScriptedDetector {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn detect(&self, request: DetectRequest<'_>) -> Result<DetectorOutput, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let boxes = self
            .table
            .lookup(request.image_ref)
            .ok_or_else(|| BackendError::MissingFixture(request.image_ref.to_string()))?;
        let out = DetectorOutput { boxes: boxes.clone() };
        out.validate_bounds(request.image.width(), request.image.height())?;
        Ok(out)
    }
}

/// Classifier that replays distributions from a fixture table.
#[derive(Debug)]
pub struct ScriptedClassifier {
    descriptor: BackendDescriptor,
    table: FixtureTable<ClassifierOutput>,
    calls: AtomicUsize,
}

impl ScriptedClassifier {
    pub fn new(taxonomy: &CropTaxonomy, table: FixtureTable<ClassifierOutput>, source: FixtureSource) -> Self {
        Self {
            descriptor: BackendDescriptor {
                kind: BackendKind::Classifier,
                crop: taxonomy.crop,
                transport: Transport::Scripted { fixture: source },
                concurrency: Concurrency::Parallel,
            },
            table,
            calls: AtomicUsize::new(0),
        }
    }

    /// One-hot fixture entries keyed by reference.
    pub fn from_classes(
        taxonomy: &CropTaxonomy,
        entries: impl IntoIterator<Item = (String, ClassId)>,
    ) -> Result<Self, FixtureError> {
        let mut table = Vec::new();
        for (key, id) in entries {
            let idx = taxonomy.index_of(id).ok_or_else(|| FixtureError::Invalid {
                key: key.clone(),
                reason: format!("class {id} is not in the {} taxonomy", taxonomy.crop),
            })?;
            table.push((key, ClassifierOutput::one_hot(idx, taxonomy.len())));
        }
        Ok(Self::new(taxonomy, FixtureTable::new(table), FixtureSource::Inline))
    }

    pub fn from_distributions(
        taxonomy: &CropTaxonomy,
        entries: impl IntoIterator<Item = (String, ClassifierOutput)>,
    ) -> Self {
        Self::new(taxonomy, FixtureTable::new(entries), FixtureSource::Inline)
    }

    pub fn load(taxonomy: &CropTaxonomy, path: impl AsRef<Path>) -> Result<Self, FixtureError> {
        let path = path.as_ref();
        let table = parse_classifier_fixture(&read(path)?, taxonomy)?;
        Ok(Self::new(taxonomy, table, FixtureSource::File(path.to_path_buf())))
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Classifier for ScriptedClassifier {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn classify(&self, request: ClassifyRequest<'_>) -> Result<ClassifierOutput, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.table
            .lookup(request.image_ref)
            .cloned()
            .ok_or_else(|| BackendError::MissingFixture(request.image_ref.to_string()))
    }
}
