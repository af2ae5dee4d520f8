//! Command-line front end: `validate`, `run`, `eval` and `report`.
//!
//! Human-readable progress goes to stderr; results, reports and JSON go to
//! the `--output` file or stdout.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use crate::backends::{
    Classifier, Detector, ScriptedClassifier, ScriptedDetector, SubprocessClassifier, SubprocessDetector,
};
use crate::dataset::{check_field_separation, load_manifest, summarize, unused_classes, ManifestError, Split};
use crate::metrics::format_percent;
use crate::metrics::{accumulate, compute_accumulated, render_report, EvalReport, MetricsError, ReportRow};
use crate::pipeline::results::write_results;
use crate::pipeline::{read_results, BatchSummary, FileImageSource, Pipeline, PipelineConfig};
use crate::taxonomy::{CropTaxonomy, Taxonomy};

pub use config::{BackendSpec, ConfigError, RunConfig, RunSettings, SplitFilter};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_ID_MISMATCH: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "plantdx", version, about = "Two-stage plant disease diagnosis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a manifest against the taxonomy and print class counts.
    Validate(ValidateArgs),
    /// Diagnose every manifest image and write results JSONL.
    Run(RunArgs),
    /// Score a results file against manifest ground truth.
    Eval(EvalArgs),
    /// Combine evaluation reports into a comparison table.
    Report(ReportArgs),
}

#[derive(Debug, clap::Args)]
pub struct ValidateArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Print the summary as JSON on stdout.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    /// TOML file with the same keys as the flags (snake_case).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: RunSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    /// Model name shown in reports.
    #[arg(long, default_value = "pipeline")]
    pub model: String,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    /// Evaluation reports written by `eval --format json`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Failure carrying the process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

/// Parses `args` and executes the command, returning the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_PARSE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Validate(a) => validate(&a),
        Command::Run(a) => run(&a),
        Command::Eval(a) => eval(&a),
        Command::Report(a) => report(&a),
    }
}

fn load_taxonomy(path: Option<&Path>) -> Result<Taxonomy, CliError> {
    match path {
        None => Ok(Taxonomy::builtin().clone()),
        Some(p) => Taxonomy::load(p).map_err(|e| CliError::new(EXIT_PARSE, format!("{}: {e}", p.display()))),
    }
}

fn manifest_error(path: &Path, e: ManifestError) -> CliError {
    let code = match e {
        ManifestError::DuplicateImageId { .. }
        | ManifestError::LabelOutOfTaxonomy { .. }
        | ManifestError::Taxonomy(_) => EXIT_VALIDATION,
        _ => EXIT_PARSE,
    };
    CliError::new(code, format!("{}: {e}", path.display()))
}

fn emit(output: Option<&Path>, text: &str) -> Result<(), CliError> {
    match output {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::new(EXIT_VALIDATION, format!("{}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::new(EXIT_VALIDATION, e.to_string()))
        }
    }
}

fn validate(a: &ValidateArgs) -> Result<(), CliError> {
    let taxonomy = load_taxonomy(a.taxonomy.as_deref())?;
    let manifest = load_manifest(&a.manifest, &taxonomy).map_err(|e| manifest_error(&a.manifest, e))?;
    let crop_tax = taxonomy.crop(manifest.crop).map_err(|e| CliError::new(EXIT_VALIDATION, e.to_string()))?;
    let summary = summarize(&manifest, crop_tax);

    eprintln!("{} ({} classes): {} images", manifest.crop.display_name(), crop_tax.len(), summary.total);
    let splits: Vec<Split> = summary.per_split_class_counts.keys().copied().collect();
    let mut header = format!("{:<8}", "class");
    for s in &splits {
        header.push_str(&format!("{:>8}", s.to_string()));
    }
    header.push_str(&format!("{:>8}", "total"));
    eprintln!("{header}");
    for (id, n) in &summary.per_class_counts {
        let code = crop_tax.label(*id).map(|l| l.code.as_str()).unwrap_or("?");
        let mut line = format!("{code:<8}");
        for s in &splits {
            line.push_str(&format!("{:>8}", summary.per_split_class_counts[s].get(id).copied().unwrap_or(0)));
        }
        line.push_str(&format!("{n:>8}"));
        eprintln!("{line}");
    }
    for id in unused_classes(&summary) {
        let code = crop_tax.label(id).map(|l| l.code.clone()).unwrap_or_else(|| id.to_string());
        eprintln!("warning: class {code} has no images");
    }
    if a.json {
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        emit(None, &(text + "\n"))?;
    }
    let shared = check_field_separation(&manifest);
    if !shared.is_empty() {
        return Err(CliError::new(
            EXIT_VALIDATION,
            format!("fields present in both train and test: {}", shared.join(", ")),
        ));
    }
    Ok(())
}

fn build_detector(spec: &BackendSpec, tax: &CropTaxonomy, timeout: Duration) -> Result<Box<dyn Detector>, CliError> {
    let err = |e: String| CliError::new(EXIT_BACKEND, format!("detector: {e}"));
    Ok(match spec {
        BackendSpec::Scripted { fixture } => {
            Box::new(ScriptedDetector::load(tax.crop, fixture).map_err(|e| err(format!("{}: {e}", fixture.display())))?)
        }
        BackendSpec::Subprocess { command } => {
            Box::new(SubprocessDetector::spawn(command, tax, timeout).map_err(|e| err(e.to_string()))?)
        }
    })
}

fn build_classifier(
    spec: &BackendSpec,
    tax: &CropTaxonomy,
    timeout: Duration,
) -> Result<Box<dyn Classifier>, CliError> {
    let err = |e: String| CliError::new(EXIT_BACKEND, format!("classifier: {e}"));
    Ok(match spec {
        BackendSpec::Scripted { fixture } => {
            Box::new(ScriptedClassifier::load(tax, fixture).map_err(|e| err(format!("{}: {e}", fixture.display())))?)
        }
        BackendSpec::Subprocess { command } => {
            Box::new(SubprocessClassifier::spawn(command, tax, timeout).map_err(|e| err(e.to_string()))?)
        }
    })
}

fn run(a: &RunArgs) -> Result<(), CliError> {
    let file = match &a.config {
        Some(p) => RunSettings::from_toml_file(p).map_err(|e| CliError::new(EXIT_PARSE, e))?,
        None => RunSettings::default(),
    };
    let cfg = RunConfig::resolve(&a.settings.over(&file)).map_err(|e| match e {
        ConfigError::Invalid(m) => CliError::new(EXIT_VALIDATION, m),
        ConfigError::Backend(m) => CliError::new(EXIT_BACKEND, m),
    })?;

    let taxonomy = load_taxonomy(cfg.taxonomy.as_deref())?;
    let mut manifest = load_manifest(&cfg.manifest, &taxonomy).map_err(|e| manifest_error(&cfg.manifest, e))?;
    match cfg.split {
        SplitFilter::All => {}
        SplitFilter::Train => manifest = manifest.with_split(Split::Train),
        SplitFilter::Test => manifest = manifest.with_split(Split::Test),
    }
    let crop_tax = taxonomy.crop(manifest.crop).map_err(|e| CliError::new(EXIT_VALIDATION, e.to_string()))?;

    let timeout = Duration::from_secs_f64(cfg.timeout_secs);
    let detector = build_detector(&cfg.detector, crop_tax, timeout)?;
    let classifier = build_classifier(&cfg.classifier, crop_tax, timeout)?;
    let pipeline_cfg = PipelineConfig {
        geometry: cfg.geometry,
        detector_conf_threshold: cfg.threshold,
        crop: manifest.crop,
        max_rois: cfg.max_rois,
        record_timing: cfg.record_timing,
    };
    let pipeline = Pipeline::new(pipeline_cfg, crop_tax, detector.as_ref(), classifier.as_ref())
        .map_err(|e| CliError::new(EXIT_BACKEND, e.to_string()))?;

    eprintln!("diagnosing {} {} images", manifest.entries.len(), manifest.crop);
    let records = pipeline
        .run_batch(&manifest.entries, &FileImageSource::new(&manifest), cfg.parallelism)
        .map_err(|e| CliError::new(EXIT_VALIDATION, e.to_string()))?;
    let echo = serde_json::to_value(&cfg).expect("config serializes");
    let summary = BatchSummary::from_records(&records, echo);

    let written = match &cfg.output {
        Some(p) => std::fs::File::create(p).and_then(|f| write_results(f, &records, &summary)),
        None => write_results(std::io::stdout().lock(), &records, &summary),
    };
    written.map_err(|e| CliError::new(EXIT_VALIDATION, format!("cannot write results: {e}")))?;

    eprintln!(
        "{} images: {} scored, {} failed; {} healthy without ROIs, {} by vote ({} tie-broken), {} upscaled",
        summary.total,
        summary.scored,
        summary.failed,
        summary.healthy_short_circuit,
        summary.majority_vote,
        summary.tie_broken,
        summary.upscaled
    );
    for (kind, n) in &summary.failures_by_kind {
        eprintln!("  {kind}: {n}");
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let taxonomy = load_taxonomy(a.taxonomy.as_deref())?;
    let results =
        read_results(&a.results).map_err(|e| CliError::new(EXIT_PARSE, format!("{}: {e}", a.results.display())))?;
    let manifest = load_manifest(&a.manifest, &taxonomy).map_err(|e| manifest_error(&a.manifest, e))?;
    let crop_tax = taxonomy.crop(manifest.crop).map_err(|e| CliError::new(EXIT_VALIDATION, e.to_string()))?;

    let acc = accumulate(&results.records, &manifest.truth(), crop_tax).map_err(|e| match e {
        MetricsError::UnknownImageId(id) => {
            CliError::new(EXIT_ID_MISMATCH, format!("results image_id `{id}` is not in the manifest"))
        }
        other => CliError::new(EXIT_VALIDATION, other.to_string()),
    })?;
    let metrics = compute_accumulated(&acc).map_err(|e| CliError::new(EXIT_VALIDATION, e.to_string()))?;
    let report = EvalReport {
        crop: manifest.crop,
        model: a.model.clone(),
        scored: acc.matrix.total(),
        errored: acc.errored,
        metrics,
        confusion: acc.matrix,
    };
    if report.errored > 0 {
        eprintln!("warning: {} errored records excluded from the confusion matrix", report.errored);
    }
    let text = match a.format {
        Format::Json => serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
        Format::Text => render_eval_text(&report, crop_tax),
    };
    emit(a.output.as_deref(), &text)
}

fn render_eval_text(r: &EvalReport, tax: &CropTaxonomy) -> String {
    let mut out = render_report(&[ReportRow::from(r)]);
    out.push_str(&format!("\nscored {}, errored {}\n", r.scored, r.errored));
    if let Some(acc) = r.metrics.all_records_accuracy {
        out.push_str(&format!("accuracy over all records: {}\n", format_percent(acc)));
    }
    out.push_str(&format!("\n{:<8}{:>9}{:>8}\n", "class", "support", "F1"));
    for (id, f1) in &r.metrics.per_class_f1 {
        let code = tax.label(*id).map(|l| l.code.as_str()).unwrap_or("?");
        let support = r.metrics.support.get(id).copied().unwrap_or(0);
        out.push_str(&format!("{code:<8}{support:>9}{:>8}\n", format_percent(*f1)));
    }
    out
}

fn report(a: &ReportArgs) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for p in &a.inputs {
        let text =
            std::fs::read_to_string(p).map_err(|e| CliError::new(EXIT_PARSE, format!("{}: {e}", p.display())))?;
        let r: EvalReport =
            serde_json::from_str(&text).map_err(|e| CliError::new(EXIT_PARSE, format!("{}: {e}", p.display())))?;
        rows.push(ReportRow::from(&r));
    }
    emit(a.output.as_deref(), &render_report(&rows))
}
