//! Fixture-serving child process for the subprocess transport.
//!
//! Answers the line protocol from the same fixture files the in-process
//! scripted backends read, keyed by the hand-off file stem. The `--die-after`,
//! `--fault` and related flags inject failures for transport tests.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, ValueEnum};
use serde_json::json;

use plantdx::backends::protocol::{Reply, Request};
use plantdx::backends::scripted::{parse_classifier_fixture, parse_detector_fixture, FixtureTable};
use plantdx::backends::{BackendKind, ClassifierOutput, Concurrency};
use plantdx::imaging::RoiBox;
use plantdx::taxonomy::{ClassId, ClassLabel, Crop, CropTaxonomy, Taxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Fault {
    /// Reply with a box whose x_min >= x_max.
    BadBox,
    /// Echo a different request id.
    WrongId,
    /// Reply with a distribution one entry short.
    ShortProbs,
    /// Reply with a distribution summing to 0.5.
    HalfSum,
    /// Reply with a line that is not JSON.
    Garbage,
}

#[derive(Debug, Parser)]
#[command(about = "Serve scripted fixtures over the plantdx backend protocol")]
struct Args {
    #[arg(long, value_parser = parse_kind)]
    kind: BackendKind,
    #[arg(long)]
    fixture: PathBuf,
    #[arg(long, default_value = "serial", value_parser = parse_concurrency)]
    concurrency: Concurrency,
    /// Kind announced in the handshake, if different from --kind.
    #[arg(long, value_parser = parse_kind)]
    declare_kind: Option<BackendKind>,
    /// Exit without replying once this many requests have been answered.
    #[arg(long)]
    die_after: Option<usize>,
    /// Exit before answering the handshake.
    #[arg(long)]
    exit_before_handshake: bool,
    /// Delay before every detect/classify reply.
    #[arg(long, default_value_t = 0)]
    sleep_ms: u64,
    /// Apply --sleep-ms only to requests for this file stem.
    #[arg(long)]
    slow_only: Option<String>,
    #[arg(long, value_enum)]
    fault: Option<Fault>,
}

fn parse_kind(s: &str) -> Result<BackendKind, String> {
    match s {
        "detector" => Ok(BackendKind::Detector),
        "classifier" => Ok(BackendKind::Classifier),
        _ => Err(format!("unknown kind `{s}`")),
    }
}

fn parse_concurrency(s: &str) -> Result<Concurrency, String> {
    match s {
        "serial" => Ok(Concurrency::Serial),
        "parallel" => Ok(Concurrency::Parallel),
        _ => Err(format!("unknown concurrency `{s}`")),
    }
}

/// Class list announced in the handshake, labelled from the built-in list
/// where possible.
fn taxonomy_from_hello(crop: Crop, ids: &[ClassId]) -> Result<CropTaxonomy, String> {
    let builtin = Taxonomy::builtin();
    let classes: Vec<ClassLabel> = ids
        .iter()
        .map(|&id| {
            builtin.label(id).cloned().unwrap_or(ClassLabel { id, code: format!("{id}"), name: format!("class {id}") })
        })
        .collect();
    let t = Taxonomy::new(classes, [(crop, ids.to_vec())].into_iter().collect()).map_err(|e| e.to_string())?;
    t.crop(crop).cloned().map_err(|e| e.to_string())
}

fn stem(path: &str) -> String {
    Path::new(path).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

enum Table {
    Boxes(FixtureTable<Vec<RoiBox>>),
    Probs(FixtureTable<ClassifierOutput>),
}

fn main() {
    let args = Args::parse();
    let fixture_text = match std::fs::read_to_string(&args.fixture) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("fixture-sidecar: cannot read {}: {e}", args.fixture.display());
            std::process::exit(2);
        }
    };

    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    let mut lines = stdin.lock().lines();
    let send = |out: &mut std::io::StdoutLock, line: String| {
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
    };

    if args.exit_before_handshake {
        std::process::exit(1);
    }
    let Some(Ok(first)) = lines.next() else { return };
    let (crop, classes) = match serde_json::from_str::<Request>(&first) {
        Ok(Request::Hello { crop, classes, .. }) => (crop, classes),
        _ => {
            send(&mut stdout, json!({"type":"error","message":"expected hello"}).to_string());
            std::process::exit(2);
        }
    };
    let taxonomy = match taxonomy_from_hello(crop, &classes) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("fixture-sidecar: bad class list: {e}");
            std::process::exit(2);
        }
    };
    let table = match args.kind {
        BackendKind::Detector => parse_detector_fixture(&fixture_text).map(Table::Boxes),
        BackendKind::Classifier => parse_classifier_fixture(&fixture_text, &taxonomy).map(Table::Probs),
    };
    let table = match table {
        Ok(t) => t,
        Err(e) => {
            eprintln!("fixture-sidecar: {e}");
            std::process::exit(2);
        }
    };
    let ready = Reply::Ready { kind: args.declare_kind.unwrap_or(args.kind), concurrency: args.concurrency };
    send(&mut stdout, serde_json::to_string(&ready).expect("reply serializes"));

    let mut answered = 0usize;
    for line in lines {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        if args.die_after.is_some_and(|n| answered >= n) {
            std::process::exit(137);
        }
        let request = serde_json::from_str::<Request>(&line);
        if let Ok(Request::Detect { image_path, .. } | Request::Classify { image_path, .. }) = &request {
            if args.sleep_ms > 0 && args.slow_only.as_ref().is_none_or(|s| *s == stem(image_path)) {
                std::thread::sleep(Duration::from_millis(args.sleep_ms));
            }
        }
        let reply = match request {
            Ok(Request::Detect { id, image_path, .. }) => match &table {
                Table::Boxes(t) => match t.lookup(&stem(&image_path)) {
                    Some(boxes) => match args.fault {
                        Some(Fault::BadBox) => json!({"type":"detections","id":id,"boxes":[
                            {"x_min":10.0,"y_min":0.0,"x_max":5.0,"y_max":4.0,"confidence":0.5}]}),
                        Some(Fault::WrongId) => json!({"type":"detections","id":format!("{id}x"),"boxes":boxes}),
                        _ => json!({"type":"detections","id":id,"boxes":boxes}),
                    },
                    None => json!({"type":"error","id":id,"message":format!("no fixture for {}", stem(&image_path))}),
                },
                Table::Probs(_) => json!({"type":"error","id":id,"message":"this backend is a classifier"}),
            },
            Ok(Request::Classify { id, image_path, .. }) => match &table {
                Table::Probs(t) => match t.lookup(&stem(&image_path)) {
                    Some(d) => {
                        let mut probs = d.probs().to_vec();
                        match args.fault {
                            Some(Fault::ShortProbs) => {
                                probs.pop();
                            }
                            Some(Fault::HalfSum) => probs.iter_mut().for_each(|p| *p /= 2.0),
                            _ => {}
                        }
                        let id = if args.fault == Some(Fault::WrongId) { format!("{id}x") } else { id };
                        json!({"type":"distribution","id":id,"probs":probs})
                    }
                    None => json!({"type":"error","id":id,"message":format!("no fixture for {}", stem(&image_path))}),
                },
                Table::Boxes(_) => json!({"type":"error","id":id,"message":"this backend is a detector"}),
            },
            Ok(Request::Hello { .. }) => json!({"type":"error","message":"duplicate hello"}),
            Err(e) => json!({"type":"error","message":format!("malformed request: {e}")}),
        };
        let text = if args.fault == Some(Fault::Garbage) { "not json".to_string() } else { reply.to_string() };
        send(&mut stdout, text);
        answered += 1;
    }
}
