//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::{sidecar_cmd, small_geometry, synth, Synth, SynthSpec};
use plantdx::backends::{
    BackendDescriptor, BackendError, Classifier, ClassifierOutput, ClassifyRequest, DetectRequest, Detector,
    DetectorOutput, ScriptedClassifier, ScriptedDetector, SubprocessDetector,
};
use plantdx::dataset::{check_field_separation, summarize, Manifest, ManifestError};
use plantdx::imaging::{diagnostic_square, extract_and_resize, resize_bilinear, ImageBuffer, PipelineGeometry, RoiBox};
use plantdx::metrics::{compute_metrics, render_report, ConfusionMatrix, MetricsReport, ReportRow};
use plantdx::pipeline::results::{parse_results, write_results};
use plantdx::pipeline::{
    majority_vote, BatchSummary, DecisionPath, DiagnosisRecord, FileImageSource, Pipeline, PipelineConfig, RoiResult,
    TimingMs,
};
use plantdx::taxonomy::{crop_taxonomy, ClassId, Crop, CropTaxonomy, Taxonomy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

// ---------------------------------------------------------------- oracles

/// Per-pixel bilinear resize written straight from the sampling contract.
fn oracle_resize(img: &ImageBuffer, out_w: u32, out_h: u32) -> ImageBuffer {
    let (in_w, in_h) = (img.width(), img.height());
    let coord = |d: u32, n_in: u32, n_out: u32| -> (u32, u32, f64) {
        let mut s = (d as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5;
        if s < 0.0 {
            s = 0.0;
        }
        if s > (n_in - 1) as f64 {
            s = (n_in - 1) as f64;
        }
        let lo = s.floor();
        let hi = if lo as u32 + 1 < n_in { lo as u32 + 1 } else { n_in - 1 };
        (lo as u32, hi, s - lo)
    };
    ImageBuffer::from_fn(out_w, out_h, |x, y| {
        let (x0, x1, fx) = coord(x, in_w, out_w);
        let (y0, y1, fy) = coord(y, in_h, out_h);
        let mut px = [0u8; 3];
        for (c, out) in px.iter_mut().enumerate() {
            let p = |xx: u32, yy: u32| img.pixel(xx, yy)[c] as f64;
            let v =
                (1.0 - fy) * ((1.0 - fx) * p(x0, y0) + fx * p(x1, y0)) + fy * ((1.0 - fx) * p(x0, y1) + fx * p(x1, y1));
            *out = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
        }
        px
    })
    .unwrap()
}

fn oracle_crop(img: &ImageBuffer, x0: u32, y0: u32, w: u32, h: u32) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, |x, y| img.pixel(x0 + x, y0 + y)).unwrap()
}

/// Window origin on one axis: rounded `c - l/2`, clamped into the frame.
fn oracle_origin(c: f64, l: u32, frame: u32) -> u32 {
    let v = (c - l as f64 / 2.0 + 0.5).floor();
    v.max(0.0).min((frame - l) as f64) as u32
}

fn oracle_preprocess(img: &ImageBuffer, size: u32) -> ImageBuffer {
    let s = img.width().min(img.height());
    let sq = oracle_crop(img, (img.width() - s) / 2, (img.height() - s) / 2, s, s);
    oracle_resize(&sq, size, size)
}

fn oracle_argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

/// Most argmax votes; count ties go to the larger probability sum over all
/// ROIs, then to the lower index. Returns (index, tie_broken).
fn oracle_vote(dists: &[Vec<f64>]) -> (usize, bool) {
    let k = dists[0].len();
    let mut counts = vec![0usize; k];
    for d in dists {
        counts[oracle_argmax(d)] += 1;
    }
    let top = *counts.iter().max().unwrap();
    let tied: Vec<usize> = (0..k).filter(|&c| counts[c] == top).collect();
    if tied.len() == 1 {
        return (tied[0], false);
    }
    let mass = |c: usize| dists.iter().map(|d| d[c]).sum::<f64>();
    let mut best = tied[0];
    for &c in &tied[1..] {
        if mass(c) > mass(best) {
            best = c;
        }
    }
    (best, true)
}

struct OracleMetrics {
    f1: Vec<f64>,
    healthy: f64,
    disease: f64,
    macro_f1: f64,
    accuracy: f64,
}

/// Per-class TP/FP/FN counted directly from label vectors (index 0 is healthy).
fn oracle_metrics(k: usize, truth: &[usize], pred: &[usize]) -> OracleMetrics {
    let mut f1 = Vec::with_capacity(k);
    for c in 0..k {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (&t, &p) in truth.iter().zip(pred) {
            if t == c && p == c {
                tp += 1.0;
            } else if p == c {
                fp += 1.0;
            } else if t == c {
                fn_ += 1.0;
            }
        }
        let d = 2.0 * tp + fp + fn_;
        f1.push(if d == 0.0 { 0.0 } else { 2.0 * tp / d });
    }
    let correct = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    OracleMetrics {
        healthy: f1[0],
        disease: f1[1..].iter().sum::<f64>() / (k - 1) as f64,
        macro_f1: f1.iter().sum::<f64>() / k as f64,
        accuracy: correct as f64 / truth.len() as f64,
        f1,
    }
}

// ------------------------------------------------------------ criteria

fn geometry_suite() -> Outcome {
    let start = Instant::now();
    let geom = PipelineGeometry::default();
    let (frame, l) = (geom.stage1_size, geom.square);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut interior = 0;
    for i in 0..10_000 {
        let (a, b) = (rng.random_range(0.0..frame as f64), rng.random_range(0.0..frame as f64));
        let (c, d) = (rng.random_range(0.0..frame as f64), rng.random_range(0.0..frame as f64));
        let Ok(roi) = RoiBox::new(a.min(c), b.min(d), a.max(c), b.max(d), rng.random()) else { continue };
        let w = diagnostic_square(&roi, &geom);
        ensure!(w.side == l, "box {i}: side {}", w.side);
        ensure!(w.x0 + l <= frame && w.y0 + l <= frame, "box {i}: window {w:?} leaves the frame");
        let (cx, cy) = ((roi.x_min + roi.x_max) / 2.0, (roi.y_min + roi.y_max) / 2.0);
        let (rx, ry) = ((cx + 0.5).floor(), (cy + 0.5).floor());
        let half = (l / 2) as f64;
        if rx - half >= 0.0 && rx + half <= frame as f64 && ry - half >= 0.0 && ry + half <= frame as f64 {
            interior += 1;
            ensure!(
                w.x0 as f64 + half == rx && w.y0 as f64 + half == ry,
                "box {i}: window {w:?} not centered on ({rx}, {ry})"
            );
        }
        ensure!(w.x0 == oracle_origin(cx, l, frame) && w.y0 == oracle_origin(cy, l, frame), "box {i}: origin");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("10000 boxes, {interior} interior, {:.0} ms", elapsed.as_secs_f64() * 1e3))
}

fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> ImageBuffer {
    let data: Vec<u8> = (0..w * h * 3).map(|_| rng.random()).collect();
    ImageBuffer::new(w, h, data).unwrap()
}

fn bilinear_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..200 {
        let s1 = rng.random_range(1..=64u32);
        let l = rng.random_range(1..=s1);
        let s2 = rng.random_range(1..=64u32);
        let geom = PipelineGeometry::new(s1, s2, l).map_err(|e| e.to_string())?;
        let frame = random_image(&mut rng, s1, s1);
        let (a, c) = (rng.random_range(0.0..=s1 as f64), rng.random_range(0.0..=s1 as f64));
        let (b, d) = (rng.random_range(0.0..=s1 as f64), rng.random_range(0.0..=s1 as f64));
        let Ok(roi) = RoiBox::new(a.min(c), b.min(d), a.max(c) + 1e-3, b.max(d) + 1e-3, 0.5) else { continue };
        let roi = if roi.x_max > s1 as f64 || roi.y_max > s1 as f64 {
            RoiBox::new(roi.x_min.min(s1 as f64 - 1.0), roi.y_min.min(s1 as f64 - 1.0), s1 as f64, s1 as f64, 0.5)
                .map_err(|e| e.to_string())?
        } else {
            roi
        };
        let (win, got) = extract_and_resize(&frame, &roi, &geom).map_err(|e| format!("image {i}: {e}"))?;
        let (cx, cy) = ((roi.x_min + roi.x_max) / 2.0, (roi.y_min + roi.y_max) / 2.0);
        let (ox, oy) = (oracle_origin(cx, l, s1), oracle_origin(cy, l, s1));
        ensure!((win.x0, win.y0) == (ox, oy), "image {i}: window {win:?} vs ({ox}, {oy})");
        let want = oracle_resize(&oracle_crop(&frame, ox, oy, l, l), s2, s2);
        ensure!(got == want, "image {i}: {s1}/{l}->{s2} patch differs from oracle");

        // arbitrary rectangular resize of an arbitrary image
        let (iw, ih) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let img = random_image(&mut rng, iw, ih);
        let (w, h) = (rng.random_range(1..=64), rng.random_range(1..=64));
        ensure!(resize_bilinear(&img, w, h) == oracle_resize(&img, w, h), "image {i}: resize to {w}x{h} differs");
        ensure!(resize_bilinear(&img, img.width(), img.height()) == img, "image {i}: identity resize changed pixels");
    }
    let line = ImageBuffer::new(2, 1, vec![0, 0, 0, 100, 100, 100]).unwrap();
    let out = resize_bilinear(&line, 4, 1);
    let reds: Vec<u8> = out.data().iter().step_by(3).copied().collect();
    ensure!(reds == [0, 25, 75, 100], "[0,100] -> {reds:?}");
    Ok("200 images match the oracle exactly; [0,100] -> [0,25,75,100]".into())
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ks = [4usize, 7, 10, 21];
    let mut worst: f64 = 0.0;
    for i in 0..500 {
        let k = ks[i % 4];
        let classes: Vec<ClassId> = match k {
            4 => crop_taxonomy(Crop::Strawberry).ids(),
            7 => crop_taxonomy(Crop::Eggplant).ids(),
            10 => crop_taxonomy(Crop::Cucumber).ids(),
            _ => Taxonomy::builtin().classes().iter().map(|c| c.id).collect(),
        };
        ensure!(classes.len() == k, "taxonomy size {} for K={k}", classes.len());
        let n = rng.random_range(1..=200);
        // skew toward the diagonal so F1 values are not all near zero
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> =
            truth.iter().map(|&t| if rng.random_bool(0.6) { t } else { rng.random_range(0..k) }).collect();
        let mut cm = ConfusionMatrix::with_classes(classes.clone()).map_err(|e| e.to_string())?;
        for (&t, &p) in truth.iter().zip(&pred) {
            cm.add(classes[t], classes[p]).map_err(|e| e.to_string())?;
        }
        let m = compute_metrics(&cm).map_err(|e| e.to_string())?;
        let o = oracle_metrics(k, &truth, &pred);
        let mut diffs = vec![
            (m.healthy_f1 - o.healthy).abs(),
            (m.avg_disease_f1 - o.disease).abs(),
            (m.macro_f1 - o.macro_f1).abs(),
            (m.micro_accuracy - o.accuracy).abs(),
        ];
        for (j, id) in classes.iter().enumerate() {
            diffs.push((m.per_class_f1[id] - o.f1[j]).abs());
        }
        let d = diffs.iter().cloned().fold(0.0, f64::max);
        worst = worst.max(d);
        ensure!(d <= 1e-9, "vector {i} (K={k}, n={n}): deviation {d:e}");
    }

    // healthy 8/10 correct, disease 9/10 correct
    let cm = ConfusionMatrix::from_rows(vec![ClassId(0), ClassId(1)], &[vec![8, 2], vec![1, 9]])
        .map_err(|e| e.to_string())?;
    let m = compute_metrics(&cm).map_err(|e| e.to_string())?;
    ensure!((m.healthy_f1 - 16.0 / 19.0).abs() < 1e-12, "2-class healthy F1 {}", m.healthy_f1);
    ensure!((m.per_class_f1[&ClassId(1)] - 18.0 / 21.0).abs() < 1e-12, "2-class disease F1");
    ensure!((m.micro_accuracy - 0.85).abs() < 1e-12, "2-class accuracy {}", m.micro_accuracy);
    Ok(format!(
        "500 vectors, max deviation {worst:.1e}; 2-class F1 {:.4}/{:.4}, accuracy {:.2}",
        m.healthy_f1,
        m.per_class_f1[&ClassId(1)],
        m.micro_accuracy
    ))
}

/// Records every image a backend is shown, keyed by request reference.
struct Recorder<B> {
    inner: B,
    seen: Mutex<BTreeMap<String, ImageBuffer>>,
}

impl<B> Recorder<B> {
    fn new(inner: B) -> Self {
        Self { inner, seen: Mutex::new(BTreeMap::new()) }
    }

    fn keys(&self) -> Vec<String> {
        self.seen.lock().unwrap().keys().cloned().collect()
    }
}

impl<B: Detector> Detector for Recorder<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }
    fn detect(&self, r: DetectRequest<'_>) -> Result<DetectorOutput, BackendError> {
        self.seen.lock().unwrap().insert(r.image_ref.to_string(), r.image.clone());
        self.inner.detect(r)
    }
}

impl<B: Classifier> Classifier for Recorder<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }
    fn classify(&self, r: ClassifyRequest<'_>) -> Result<ClassifierOutput, BackendError> {
        self.seen.lock().unwrap().insert(r.image_ref.to_string(), r.image.clone());
        self.inner.classify(r)
    }
}

/// Straight-line reimplementation of one image's diagnosis from the fixtures.
fn reference_record(
    d: &Synth,
    id: &str,
    geom: &PipelineGeometry,
    tax: &CropTaxonomy,
) -> (DiagnosisRecord, ImageBuffer, Vec<ImageBuffer>) {
    let img = &d.images[id];
    let frame = oracle_preprocess(img, geom.stage1_size);
    let boxes = &d.boxes[id];
    let mut kept: Vec<RoiBox> = boxes.iter().copied().filter(|b| b.confidence >= 0.25).collect();
    kept.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());

    let mut rec = DiagnosisRecord {
        image_id: id.to_string(),
        source_size: Some([img.width(), img.height()]),
        preprocessed_size: Some(geom.stage1_size),
        upscaled: img.width().min(img.height()) < geom.stage1_size,
        boxes_detected: boxes.len(),
        final_label_id: None,
        final_label_code: None,
        decision_path: None,
        rois: vec![],
        tie_broken: false,
        errors: vec![],
        timing_ms: TimingMs::default(),
    };
    let mut patches = Vec::new();
    if kept.is_empty() {
        rec.final_label_id = Some(ClassId(0));
        rec.final_label_code = Some("0_HE".into());
        rec.decision_path = Some(DecisionPath::NoRoiHealthy);
        return (rec, frame, patches);
    }
    let mut dists = Vec::new();
    for (k, b) in kept.iter().enumerate() {
        let (cx, cy) = ((b.x_min + b.x_max) / 2.0, (b.y_min + b.y_max) / 2.0);
        let (x0, y0) =
            (oracle_origin(cx, geom.square, geom.stage1_size), oracle_origin(cy, geom.square, geom.stage1_size));
        patches.push(oracle_resize(
            &oracle_crop(&frame, x0, y0, geom.square, geom.square),
            geom.stage2_size,
            geom.stage2_size,
        ));
        let p = d.dists[&format!("{id}.roi{k}")].clone();
        rec.rois.push(RoiResult {
            roi: *b,
            window: plantdx::imaging::Window { x0, y0, side: geom.square },
            probs: ClassifierOutput::new(p.clone(), tax.len()).unwrap(),
            argmax: tax.id_at(oracle_argmax(&p)).unwrap(),
        });
        dists.push(p);
    }
    let (winner, tie) = oracle_vote(&dists);
    let label = &tax.classes()[winner];
    rec.final_label_id = Some(label.id);
    rec.final_label_code = Some(label.code.clone());
    rec.decision_path = Some(DecisionPath::MajorityVote);
    rec.tie_broken = tie;
    (rec, frame, patches)
}

fn pipeline_semantics() -> Outcome {
    let d = synth(&SynthSpec { images: 100, seed: 11, ..Default::default() });
    let geom = small_geometry();
    let tax = crop_taxonomy(Crop::Strawberry);
    let det = Recorder::new(ScriptedDetector::load(Crop::Strawberry, &d.detector_fixture).map_err(|e| e.to_string())?);
    let cls = Recorder::new(ScriptedClassifier::load(tax, &d.classifier_fixture).map_err(|e| e.to_string())?);
    let cfg = PipelineConfig { geometry: geom, ..PipelineConfig::new(Crop::Strawberry) };
    let pipeline = Pipeline::new(cfg, tax, &det, &cls).map_err(|e| e.to_string())?;
    let source = FileImageSource::new(&d.manifest);

    let serial = pipeline.run_batch(&d.manifest.entries, &source, 1).map_err(|e| e.to_string())?;
    let serial_calls = cls.keys();
    let parallel = pipeline.run_batch(&d.manifest.entries, &source, 8).map_err(|e| e.to_string())?;

    // (a) zero-ROI images never reach the classifier
    let short_circuit: Vec<&DiagnosisRecord> =
        serial.iter().filter(|r| r.decision_path == Some(DecisionPath::NoRoiHealthy)).collect();
    ensure!(!short_circuit.is_empty(), "fixture has no zero-ROI images");
    for r in &short_circuit {
        let prefix = format!("{}.roi", r.image_id);
        let n = serial_calls.iter().filter(|k| k.starts_with(&prefix)).count();
        ensure!(n == 0, "{}: classifier called {n} times", r.image_id);
    }
    let expected_calls: usize = serial.iter().map(|r| r.rois.len()).sum();
    ensure!(serial_calls.len() == expected_calls, "{} classifier calls, {expected_calls} ROIs", serial_calls.len());

    // (b) byte-identical results for parallelism 1 and 8
    let bytes = |records: &[DiagnosisRecord]| {
        let summary = BatchSummary::from_records(records, serde_json::json!({"geometry": geom}));
        let mut buf = Vec::new();
        write_results(&mut buf, records, &summary).unwrap();
        buf
    };
    ensure!(bytes(&serial) == bytes(&parallel), "parallelism 1 and 8 produce different results");

    // (c) straight-line reference, record for record and pixel for pixel
    let det_seen = det.seen.lock().unwrap();
    let cls_seen = cls.seen.lock().unwrap();
    for (rec, entry) in serial.iter().zip(&d.manifest.entries) {
        let (want, frame, patches) = reference_record(&d, &entry.image_id, &geom, tax);
        ensure!(*rec == want, "{}: record differs from reference\n got {rec:?}\nwant {want:?}", entry.image_id);
        ensure!(det_seen[&entry.image_id] == frame, "{}: detector input differs", entry.image_id);
        for (k, p) in patches.iter().enumerate() {
            ensure!(cls_seen[&format!("{}.roi{k}", entry.image_id)] == *p, "{} roi {k}: patch differs", entry.image_id);
        }
    }
    let ties = serial.iter().filter(|r| r.tie_broken).count();
    Ok(format!(
        "{} short-circuits, {} classifier calls, {ties} tie-breaks; parallel == serial; reference matches",
        short_circuit.len(),
        expected_calls
    ))
}

fn default_geometry_reference() -> Outcome {
    let d = synth(&SynthSpec { images: 3, seed: 5, stage1_size: 1472, noise: 0.5, ..Default::default() });
    let geom = PipelineGeometry::default();
    let tax = crop_taxonomy(Crop::Strawberry);
    let det = ScriptedDetector::load(Crop::Strawberry, &d.detector_fixture).map_err(|e| e.to_string())?;
    let cls = Recorder::new(ScriptedClassifier::load(tax, &d.classifier_fixture).map_err(|e| e.to_string())?);
    let pipeline = Pipeline::new(PipelineConfig::new(Crop::Strawberry), tax, &det, &cls).map_err(|e| e.to_string())?;
    let records =
        pipeline.run_batch(&d.manifest.entries, &FileImageSource::new(&d.manifest), 1).map_err(|e| e.to_string())?;
    let seen = cls.seen.lock().unwrap();
    for (rec, entry) in records.iter().zip(&d.manifest.entries) {
        let (want, _, patches) = reference_record(&d, &entry.image_id, &geom, tax);
        ensure!(*rec == want, "{}: record differs from reference", entry.image_id);
        for (k, p) in patches.iter().enumerate() {
            ensure!(seen[&format!("{}.roi{k}", entry.image_id)] == *p, "{} roi {k}: patch differs", entry.image_id);
        }
    }
    Ok("1472/512/512 records and patches match the reference".into())
}

fn vote_enumeration() -> Outcome {
    let start = Instant::now();
    let tax = crop_taxonomy(Crop::Strawberry);
    // three distributions per class with the class as strict argmax
    let templates = |c: usize| -> [Vec<f64>; 3] {
        let mut one_hot = vec![0.0; 4];
        one_hot[c] = 1.0;
        let mut spread = vec![0.0; 4];
        spread[c] = 0.5;
        spread[(c + 1) % 4] = 0.375;
        spread[(c + 2) % 4] = 0.125;
        let mut flat = vec![0.125; 4];
        flat[c] = 0.375;
        flat[(c + 1) % 4] = 0.25;
        flat[(c + 3) % 4] = 0.25;
        [one_hot, spread, flat]
    };
    let mut multisets: Vec<Vec<usize>> = Vec::new();
    fn extend(prefix: &mut Vec<usize>, from: usize, left: usize, out: &mut Vec<Vec<usize>>) {
        if !prefix.is_empty() {
            out.push(prefix.clone());
        }
        if left == 0 {
            return;
        }
        for c in from..4 {
            prefix.push(c);
            extend(prefix, c, left - 1, out);
            prefix.pop();
        }
    }
    extend(&mut Vec::new(), 0, 4, &mut multisets);
    ensure!(multisets.len() == 4 + 10 + 20 + 35, "{} multisets", multisets.len());

    let mut cases = 0usize;
    let mut ties = 0usize;
    for ms in &multisets {
        let n = ms.len();
        for choice in 0..3usize.pow(n as u32) {
            let dists: Vec<Vec<f64>> = ms
                .iter()
                .enumerate()
                .map(|(i, &c)| templates(c)[(choice / 3usize.pow(i as u32)) % 3].clone())
                .collect();
            let (want, tie) = oracle_vote(&dists);
            ties += tie as usize;
            let outputs: Vec<ClassifierOutput> =
                dists.iter().map(|p| ClassifierOutput::new(p.clone(), 4).unwrap()).collect();
            for perm in permutations(n) {
                let shuffled: Vec<ClassifierOutput> = perm.iter().map(|&i| outputs[i].clone()).collect();
                let v = majority_vote(&shuffled, tax).map_err(|e| e.to_string())?;
                ensure!(
                    v.label == tax.id_at(want).unwrap() && v.tie_broken == tie,
                    "votes {ms:?} choice {choice} perm {perm:?}: got {v:?}, want index {want} tie {tie}"
                );
                cases += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!(
        "{} multisets, {cases} ordered cases ({ties} tie configurations), {:.0} ms",
        multisets.len(),
        elapsed.as_secs_f64() * 1e3
    ))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn fixture_manifest(crop: Crop, counts: &[(u8, usize)], field: impl Fn(usize) -> String) -> String {
    let mut s = format!("{{\"schema\":1,\"crop\":\"{}\"}}\n", crop.as_str());
    let mut i = 0;
    for &(label, n) in counts {
        for _ in 0..n {
            s.push_str(&format!(
                "{{\"image_id\":\"t{i}\",\"path\":\"img/{i}.jpg\",\"label\":{label},\"field\":\"{}\",\"split\":\"test\"}}\n",
                field(i)
            ));
            i += 1;
        }
    }
    s
}

fn taxonomy_manifest_fidelity() -> Outcome {
    let tax = Taxonomy::builtin();
    let straw = [(0u8, 578usize), (1, 893), (3, 609), (11, 227)];
    let m = Manifest::parse(&fixture_manifest(Crop::Strawberry, &straw, |_| "test-field".into()), tax)
        .map_err(|e| e.to_string())?;
    let s = summarize(&m, tax.crop(Crop::Strawberry).unwrap());
    ensure!(s.total == 2307, "strawberry total {}", s.total);
    for (id, n) in straw {
        ensure!(s.per_class_counts[&ClassId(id)] == n, "strawberry class {id}");
    }

    let cucumber = [
        (0u8, 5576usize),
        (1, 1898),
        (3, 1125),
        (7, 2578),
        (8, 1813),
        (12, 957),
        (15, 3291),
        (17, 179),
        (18, 1626),
        (19, 1004),
    ];
    let m = Manifest::parse(&fixture_manifest(Crop::Cucumber, &cucumber, |_| "test-field".into()), tax)
        .map_err(|e| e.to_string())?;
    let s = summarize(&m, tax.crop(Crop::Cucumber).unwrap());
    ensure!(s.total == 20047, "cucumber total {}", s.total);
    ensure!(s.per_class_counts.len() == 10, "cucumber classes {}", s.per_class_counts.len());

    // a downy mildew label is not a strawberry class
    let bad = fixture_manifest(Crop::Strawberry, &[(0, 2), (7, 1)], |_| "f".into());
    match Manifest::parse(&bad, tax) {
        Err(ManifestError::LabelOutOfTaxonomy { label: ClassId(7), line: 4, .. }) => {}
        other => return Err(format!("cross-crop label accepted or misreported: {other:?}")),
    }

    let mut text = fixture_manifest(Crop::Tomato, &[(0, 3), (2, 3)], |i| format!("farm{}", i % 3));
    text.push_str("{\"image_id\":\"tr0\",\"path\":\"a.jpg\",\"label\":0,\"field\":\"north\",\"split\":\"train\"}\n");
    let clean = Manifest::parse(&text, tax).map_err(|e| e.to_string())?;
    ensure!(check_field_separation(&clean).is_empty(), "false overlap on a clean manifest");
    text.push_str("{\"image_id\":\"tr1\",\"path\":\"b.jpg\",\"label\":2,\"field\":\"farm1\",\"split\":\"train\"}\n");
    let seeded = Manifest::parse(&text, tax).map_err(|e| e.to_string())?;
    let overlap = check_field_separation(&seeded);
    ensure!(overlap == ["farm1"], "seeded overlap reported as {overlap:?}");
    Ok("strawberry 2307, cucumber 20047; label 7 rejected for strawberry; overlap [farm1] flagged".into())
}

fn report_rendering() -> Outcome {
    let metrics = MetricsReport {
        per_class_f1: [0u8, 1, 3, 11].iter().map(|&i| (ClassId(i), 0.0)).collect(),
        healthy_f1: 0.804,
        avg_disease_f1: 0.894,
        macro_f1: 0.872,
        micro_accuracy: 0.888,
        support: BTreeMap::new(),
        zero_support: vec![],
        all_records_accuracy: None,
    };
    let text = render_report(&[ReportRow { crop: Crop::Strawberry, model: "HODRF (proposed)".into(), metrics }]);
    let header = text.lines().next().unwrap_or_default();
    let columns = ["F1-score (Healthy)", "Avg. F1-score (Diseases)", "Macro F1-score", "Micro Accuracy"];
    let pos: Vec<Option<usize>> = columns.iter().map(|c| header.find(c)).collect();
    ensure!(pos.iter().all(Option::is_some), "header missing a column: {header}");
    ensure!(pos.windows(2).all(|w| w[0] < w[1]), "columns out of order: {header}");
    let row = text.lines().find(|l| l.starts_with("Strawberry")).ok_or("no strawberry row")?;
    let cells: Vec<String> =
        row.split_whitespace().rev().take(4).map(|c| c.trim_end_matches('*').to_string()).collect();
    let cells: Vec<&str> = cells.iter().rev().map(String::as_str).collect();
    ensure!(cells == ["80.4", "89.4", "87.2", "88.8"], "row renders as {cells:?}");
    Ok(format!("`{}`", row.split_whitespace().collect::<Vec<_>>().join(" ")))
}

/// Kills the wrapped subprocess with SIGKILL just before its `nth` request.
struct KillAt {
    inner: SubprocessDetector,
    nth: usize,
    calls: Mutex<usize>,
}

impl Detector for KillAt {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }
    fn detect(&self, r: DetectRequest<'_>) -> Result<DetectorOutput, BackendError> {
        let mut calls = self.calls.lock().unwrap();
        *calls += 1;
        if *calls == self.nth {
            let pid = self.inner.pid().to_string();
            std::process::Command::new("kill")
                .args(["-9", &pid])
                .status()
                .map_err(|e| BackendError::Io(e.to_string()))?;
        }
        drop(calls);
        self.inner.detect(r)
    }
}

fn fault_tolerance() -> Outcome {
    let d = synth(&SynthSpec { images: 20, seed: 13, ..Default::default() });
    let tax = crop_taxonomy(Crop::Strawberry);

    // library: SIGKILL the detector child before the 8th image
    let inner =
        SubprocessDetector::spawn(&sidecar_cmd("detector", &d.detector_fixture, &[]), tax, Duration::from_secs(10))
            .map_err(|e| e.to_string())?;
    let det = KillAt { inner, nth: 8, calls: Mutex::new(0) };
    let cls = ScriptedClassifier::load(tax, &d.classifier_fixture).map_err(|e| e.to_string())?;
    let cfg = PipelineConfig { geometry: small_geometry(), ..PipelineConfig::new(Crop::Strawberry) };
    let pipeline = Pipeline::new(cfg, tax, &det, &cls).map_err(|e| e.to_string())?;
    let records =
        pipeline.run_batch(&d.manifest.entries, &FileImageSource::new(&d.manifest), 1).map_err(|e| e.to_string())?;
    ensure!(records.len() == 20, "{} records", records.len());
    ensure!(records[..7].iter().all(|r| r.is_scored()), "images before the kill failed");
    for r in &records[7..] {
        ensure!(
            r.errors.len() == 1 && r.errors[0].kind == "BackendUnavailable" && r.final_label_id.is_none(),
            "{}: {:?}",
            r.image_id,
            r.errors
        );
    }
    let summary = BatchSummary::from_records(&records, serde_json::Value::Null);
    ensure!(summary.failed == 13 && summary.scored == 7, "summary {}/{}", summary.scored, summary.failed);

    // CLI: the detector child dies mid-batch, the run still succeeds
    let out_path = d.path("results.jsonl");
    let cmd =
        format!("'{}' --kind detector --fixture '{}' --die-after 5", common::SIDECAR, d.detector_fixture.display());
    let out = common::plantdx(
        &[
            "run",
            "--manifest",
            d.manifest_path.to_str().unwrap(),
            "--detector-cmd",
            &cmd,
            "--classifier-fixture",
            d.classifier_fixture.to_str().unwrap(),
            "--stage1-size",
            "128",
            "--stage2-size",
            "24",
            "--square",
            "48",
            "--output",
            out_path.to_str().unwrap(),
        ],
        d.dir.path(),
    );
    ensure!(
        out.status.code() == Some(0),
        "run exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    let parsed =
        parse_results(&std::fs::read_to_string(&out_path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let failed: Vec<&DiagnosisRecord> = parsed.records.iter().filter(|r| !r.errors.is_empty()).collect();
    let cli_summary = parsed.summary.ok_or("no summary line")?;
    ensure!(failed.len() == 15, "{} failed records", failed.len());
    ensure!(cli_summary.failed == 15, "summary failed = {}", cli_summary.failed);
    ensure!(cli_summary.failures_by_kind.get("BackendUnavailable") == Some(&15), "{:?}", cli_summary.failures_by_kind);
    Ok("SIGKILL before image 8: 7 scored, 13 per-image errors; CLI run with a dying detector: 15 failed, exit 0".into())
}

fn main() {
    let start = Instant::now();
    let criteria: [Criterion; 9] = [
        ("geometry suite", geometry_suite),
        ("bilinear oracle", bilinear_oracle),
        ("metric oracle equivalence", metric_oracle),
        ("pipeline semantics", pipeline_semantics),
        ("pipeline semantics at default geometry", default_geometry_reference),
        ("vote properties", vote_enumeration),
        ("taxonomy/manifest fidelity", taxonomy_manifest_fidelity),
        ("report rendering", report_rendering),
        ("fault tolerance", fault_tolerance),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match std::panic::catch_unwind(check) {
            Ok(Ok(detail)) => println!("PASS {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL {name}: panicked");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1} s",
        criteria.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
