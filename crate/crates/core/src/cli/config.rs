//! `run` settings: command-line flags layered over an optional TOML file
//! layered over defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::DEFAULT_TIMEOUT;
use crate::imaging::PipelineGeometry;
use crate::pipeline::DEFAULT_CONF_THRESHOLD;

/// Every `run` setting, each optional. Flags and the config file share it.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize, clap::Args)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    /// Dataset manifest (JSONL).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Scripted detector fixture (JSON).
    #[arg(long)]
    pub detector_fixture: Option<PathBuf>,
    /// Detector subprocess command line.
    #[arg(long)]
    pub detector_cmd: Option<String>,
    /// Scripted classifier fixture (JSON).
    #[arg(long)]
    pub classifier_fixture: Option<PathBuf>,
    /// Classifier subprocess command line.
    #[arg(long)]
    pub classifier_cmd: Option<String>,
    /// Custom taxonomy file (JSON); defaults to the built-in 21 classes.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Stage-1 square side in pixels.
    #[arg(long)]
    pub stage1_size: Option<u32>,
    /// Classifier input side in pixels.
    #[arg(long)]
    pub stage2_size: Option<u32>,
    /// Diagnostic square side in pixels.
    #[arg(long)]
    pub square: Option<u32>,
    /// Minimum detector confidence for a box to be classified.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Classify at most this many boxes per image (strongest first).
    #[arg(long)]
    pub max_rois: Option<usize>,
    /// Images diagnosed concurrently.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Results file; `-` or unset writes to stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Restrict the run to one split: `train`, `test` or `all`.
    #[arg(long)]
    pub split: Option<String>,
    /// Per-request backend timeout in seconds.
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    /// Record wall-clock timings (makes results non-reproducible).
    #[arg(long)]
    pub record_timing: Option<bool>,
    /// Reserved; echoed into the results summary.
    #[arg(long)]
    pub seed: Option<u64>,
}

macro_rules! layer {
    ($hi:expr, $lo:expr, $($field:ident),+) => {
        RunSettings { $($field: $hi.$field.clone().or_else(|| $lo.$field.clone()),)+ }
    };
}

impl RunSettings {
    pub fn from_toml_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let mut s: RunSettings = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut s.manifest, &mut s.detector_fixture, &mut s.classifier_fixture, &mut s.taxonomy, &mut s.output]
            .into_iter()
            .flatten()
        {
            if p.is_relative() && p.as_os_str() != "-" {
                *p = base.join(&*p);
            }
        }
        Ok(s)
    }

    /// `self` wins field by field. Backend transports are layered as a unit
    /// so a flag for one transport replaces the file's other transport.
    pub fn over(&self, lower: &RunSettings) -> RunSettings {
        let mut merged = layer!(
            self,
            lower,
            manifest,
            detector_fixture,
            detector_cmd,
            classifier_fixture,
            classifier_cmd,
            taxonomy,
            stage1_size,
            stage2_size,
            square,
            threshold,
            max_rois,
            parallelism,
            output,
            split,
            timeout_secs,
            record_timing,
            seed
        );
        if self.detector_fixture.is_some() || self.detector_cmd.is_some() {
            merged.detector_fixture = self.detector_fixture.clone();
            merged.detector_cmd = self.detector_cmd.clone();
        }
        if self.classifier_fixture.is_some() || self.classifier_cmd.is_some() {
            merged.classifier_fixture = self.classifier_fixture.clone();
            merged.classifier_cmd = self.classifier_cmd.clone();
        }
        merged
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "transport", rename_all = "lowercase")]
pub enum BackendSpec {
    Scripted { fixture: PathBuf },
    Subprocess { command: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitFilter {
    All,
    Train,
    Test,
}

/// Fully resolved `run` configuration.
///
/// The serialized form is echoed into the results summary; it leaves out
/// `parallelism` and `output`, which do not affect results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub detector: BackendSpec,
    pub classifier: BackendSpec,
    pub taxonomy: Option<PathBuf>,
    pub geometry: PipelineGeometry,
    pub threshold: f64,
    pub max_rois: Option<usize>,
    #[serde(skip)]
    pub parallelism: usize,
    #[serde(skip)]
    pub output: Option<PathBuf>,
    pub split: SplitFilter,
    pub timeout_secs: f64,
    pub record_timing: bool,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    /// Bad or missing general setting.
    Invalid(String),
    /// Missing or ambiguous backend specification.
    Backend(String),
}

fn backend_spec(name: &str, fixture: &Option<PathBuf>, cmd: &Option<String>) -> Result<BackendSpec, ConfigError> {
    match (fixture, cmd) {
        (Some(f), None) => Ok(BackendSpec::Scripted { fixture: f.clone() }),
        (None, Some(c)) => {
            let argv = shlex::split(c)
                .filter(|v| !v.is_empty())
                .ok_or_else(|| ConfigError::Backend(format!("cannot parse {name} command `{c}`")))?;
            Ok(BackendSpec::Subprocess { command: argv })
        }
        (None, None) => Err(ConfigError::Backend(format!("no {name} configured (need {name}_fixture or {name}_cmd)"))),
        (Some(_), Some(_)) => {
            Err(ConfigError::Backend(format!("{name} has both a fixture and a command; choose one transport")))
        }
    }
}

impl RunConfig {
    pub fn resolve(s: &RunSettings) -> Result<Self, ConfigError> {
        let manifest = s.manifest.clone().ok_or_else(|| ConfigError::Invalid("no manifest given".into()))?;
        let defaults = PipelineGeometry::default();
        let geometry = PipelineGeometry {
            stage1_size: s.stage1_size.unwrap_or(defaults.stage1_size),
            stage2_size: s.stage2_size.unwrap_or(defaults.stage2_size),
            square: s.square.unwrap_or(defaults.square),
        };
        geometry.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let threshold = s.threshold.unwrap_or(DEFAULT_CONF_THRESHOLD);
        if !(0.0..=1.0).contains(&threshold) {
            return Err(ConfigError::Invalid(format!("threshold {threshold} outside [0,1]")));
        }
        if s.max_rois == Some(0) {
            return Err(ConfigError::Invalid("max_rois must be positive".into()));
        }
        let parallelism = s.parallelism.unwrap_or(1);
        if parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be positive".into()));
        }
        let split = match s.split.as_deref().unwrap_or("all") {
            "all" => SplitFilter::All,
            "train" => SplitFilter::Train,
            "test" => SplitFilter::Test,
            other => return Err(ConfigError::Invalid(format!("unknown split `{other}`"))),
        };
        let timeout_secs = s.timeout_secs.unwrap_or(DEFAULT_TIMEOUT.as_secs_f64());
        if !(timeout_secs.is_finite() && timeout_secs > 0.0) {
            return Err(ConfigError::Invalid(format!("timeout_secs {timeout_secs} must be positive")));
        }
        Ok(RunConfig {
            manifest,
            detector: backend_spec("detector", &s.detector_fixture, &s.detector_cmd)?,
            classifier: backend_spec("classifier", &s.classifier_fixture, &s.classifier_cmd)?,
            taxonomy: s.taxonomy.clone(),
            geometry,
            threshold,
            max_rois: s.max_rois,
            parallelism,
            output: s.output.clone().filter(|p| p.as_os_str() != "-"),
            split,
            timeout_secs,
            record_timing: s.record_timing.unwrap_or(false),
            seed: s.seed,
        })
    }
}
