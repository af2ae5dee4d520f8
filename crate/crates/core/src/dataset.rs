//! Dataset manifests: JSONL ingestion, validation and the summaries used to
//! check a dataset against its expected per-class structure.
//!
//! ```text
//! {"schema":1,"crop":"strawberry"}
//! {"image_id":"s-0001","path":"img/s-0001.jpg","label":3,"field":"f12","split":"test"}
//! {"image_id":"s-0002","path":"img/s-0002.jpg","label":0,"field":"f03","split":"train","boxes":[...],"tags":["detector"]}
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{ClassId, Crop, CropTaxonomy, Taxonomy, TaxonomyError};

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("failed to read manifest {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("manifest is empty: missing header line")]
    MissingHeader,
    #[error("unsupported manifest schema {0}")]
    UnsupportedSchema(u32),
    #[error("line {line}: duplicate image_id `{image_id}`")]
    DuplicateImageId { image_id: String, line: usize },
    #[error("line {line}: image `{image_id}` has label {label}, which is not a {crop} class")]
    LabelOutOfTaxonomy { image_id: String, label: ClassId, crop: Crop, line: usize },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

impl ManifestError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ManifestError::Parse { line, .. }
            | ManifestError::DuplicateImageId { line, .. }
            | ManifestError::LabelOutOfTaxonomy { line, .. } => Some(*line),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Box annotation carried for dataset fidelity; inference ignores it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    pub path: String,
    pub label: ClassId,
    pub field: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<BoxAnnotation>>,
    /// Free-form subset markers (e.g. which model a training image feeds).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: u32,
    crop: Crop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub crop: Crop,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative entry paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(crop: Crop, entries: Vec<ManifestEntry>) -> Self {
        Self { crop, entries, base_dir: PathBuf::from(".") }
    }

    /// Parses JSONL text and checks ids and labels against `taxonomy`.
    pub fn parse(text: &str, taxonomy: &Taxonomy) -> Result<Self, ManifestError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty());
        let (hline, htext) = lines.next().ok_or(ManifestError::MissingHeader)?;
        let header: Header = serde_json::from_str(htext)
            .map_err(|e| ManifestError::Parse { line: hline, message: format!("bad header: {e}") })?;
        if header.schema != MANIFEST_SCHEMA {
            return Err(ManifestError::UnsupportedSchema(header.schema));
        }
        let crop_tax = taxonomy.crop(header.crop)?;

        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for (line, raw) in lines {
            let entry: ManifestEntry =
                serde_json::from_str(raw).map_err(|e| ManifestError::Parse { line, message: e.to_string() })?;
            if !crop_tax.contains(entry.label) {
                return Err(ManifestError::LabelOutOfTaxonomy {
                    image_id: entry.image_id,
                    label: entry.label,
                    crop: header.crop,
                    line,
                });
            }
            if !seen.insert(entry.image_id.clone()) {
                return Err(ManifestError::DuplicateImageId { image_id: entry.image_id, line });
            }
            entries.push(entry);
        }
        Ok(Self::new(header.crop, entries))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&Header { schema: MANIFEST_SCHEMA, crop: self.crop }).expect("header");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn resolve_path(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn with_split(&self, split: Split) -> Manifest {
        Manifest {
            crop: self.crop,
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn truth(&self) -> BTreeMap<String, ClassId> {
        self.entries.iter().map(|e| (e.image_id.clone(), e.label)).collect()
    }
}

pub fn load_manifest(path: impl AsRef<Path>, taxonomy: &Taxonomy) -> Result<Manifest, ManifestError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
    let mut m = Manifest::parse(&text, taxonomy)?;
    m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    Ok(m)
}

pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(manifest.to_jsonl().as_bytes())?;
    f.flush()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestSummary {
    pub crop: Crop,
    /// Every crop class appears, including those with zero entries.
    pub per_class_counts: BTreeMap<ClassId, usize>,
    pub per_split_class_counts: BTreeMap<Split, BTreeMap<ClassId, usize>>,
    pub total: usize,
    pub fields_by_split: BTreeMap<Split, BTreeSet<String>>,
}

pub fn summarize(manifest: &Manifest, taxonomy: &CropTaxonomy) -> ManifestSummary {
    let zeros: BTreeMap<ClassId, usize> = taxonomy.ids().into_iter().map(|id| (id, 0)).collect();
    let mut per_class_counts = zeros.clone();
    let mut per_split_class_counts: BTreeMap<Split, BTreeMap<ClassId, usize>> = BTreeMap::new();
    let mut fields_by_split: BTreeMap<Split, BTreeSet<String>> = BTreeMap::new();
    for e in &manifest.entries {
        *per_class_counts.entry(e.label).or_insert(0) += 1;
        *per_split_class_counts.entry(e.split).or_insert_with(|| zeros.clone()).entry(e.label).or_insert(0) += 1;
        fields_by_split.entry(e.split).or_default().insert(e.field.clone());
    }
    ManifestSummary {
        crop: manifest.crop,
        per_class_counts,
        per_split_class_counts,
        total: manifest.entries.len(),
        fields_by_split,
    }
}

/// Field ids present in both the train and the test split, sorted.
pub fn check_field_separation(manifest: &Manifest) -> Vec<String> {
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    for e in &manifest.entries {
        match e.split {
            Split::Train => train.insert(e.field.as_str()),
            Split::Test => test.insert(e.field.as_str()),
        };
    }
    train.intersection(&test).map(|s| s.to_string()).collect()
}

/// Crop classes with no entries at all; reported as warnings, not errors.
pub fn unused_classes(summary: &ManifestSummary) -> Vec<ClassId> {
    summary.per_class_counts.iter().filter(|(_, &n)| n == 0).map(|(&id, _)| id).collect()
}
