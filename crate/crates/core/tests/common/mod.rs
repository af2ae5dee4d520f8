//! Synthetic datasets with scripted fixtures, shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plantdx::dataset::{save_manifest, Manifest, ManifestEntry, Split};
use plantdx::imaging::{ImageBuffer, PipelineGeometry, RoiBox};
use plantdx::taxonomy::{crop_taxonomy, ClassId, Crop};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDECAR: &str = env!("CARGO_BIN_EXE_plantdx-fixture-sidecar");
pub const PLANTDX: &str = env!("CARGO_BIN_EXE_plantdx");

pub struct Synth {
    pub dir: tempfile::TempDir,
    pub manifest_path: PathBuf,
    pub detector_fixture: PathBuf,
    pub classifier_fixture: PathBuf,
    pub manifest: Manifest,
    pub images: BTreeMap<String, ImageBuffer>,
    pub boxes: BTreeMap<String, Vec<RoiBox>>,
    /// Distribution per ROI reference (`{image_id}.roi{k}`).
    pub dists: BTreeMap<String, Vec<f64>>,
}

impl Synth {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

pub struct SynthSpec {
    pub crop: Crop,
    pub images: usize,
    pub seed: u64,
    /// Frame the fixture boxes are expressed in.
    pub stage1_size: u32,
    /// Probability that a diseased image's ROI votes for another class.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { crop: Crop::Strawberry, images: 100, seed: 7, stage1_size: 128, noise: 0.3 }
    }
}

pub fn small_geometry() -> PipelineGeometry {
    PipelineGeometry::new(128, 24, 48).unwrap()
}

/// Probabilities in eighths, so sums are exact.
fn dist_peaked_at(rng: &mut ChaCha8Rng, k: usize, peak: usize) -> Vec<f64> {
    if rng.random_bool(0.4) {
        let mut v = vec![0.0; k];
        v[peak] = 1.0;
        return v;
    }
    let mut eighths = vec![0u32; k];
    eighths[peak] = 4;
    for _ in 0..4 {
        eighths[rng.random_range(0..k)] += 1;
    }
    eighths.into_iter().map(|e| e as f64 / 8.0).collect()
}

fn random_box(rng: &mut ChaCha8Rng, frame: u32, conf: f64) -> RoiBox {
    let f = frame as f64;
    let w = rng.random_range(2.0..f / 3.0);
    let h = rng.random_range(2.0..f / 3.0);
    let x = rng.random_range(0.0..f - w);
    let y = rng.random_range(0.0..f - h);
    RoiBox::new(x, y, x + w, y + h, conf).unwrap()
}

pub fn synth(spec: &SynthSpec) -> Synth {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tax = crop_taxonomy(spec.crop);
    let k = tax.len();
    let mut entries = Vec::new();
    let mut images = BTreeMap::new();
    let mut boxes = BTreeMap::new();
    let mut dists = BTreeMap::new();

    for i in 0..spec.images {
        let id = format!("img{i:03}");
        let class_idx = rng.random_range(0..k);
        let label = tax.id_at(class_idx).unwrap();
        let (w, h) = (rng.random_range(16..90u32), rng.random_range(16..90u32));
        let seed: u8 = rng.random();
        let img = ImageBuffer::from_fn(w, h, |x, y| [(x * 7 + y * 3) as u8 ^ seed, (x * y) as u8, (x + 2 * y) as u8])
            .unwrap();
        img.save_png(dir.path().join(format!("{id}.png"))).unwrap();

        let mut bs = Vec::new();
        if class_idx == 0 {
            // a healthy image may still carry sub-threshold detections
            for _ in 0..rng.random_range(0..3) {
                let conf = rng.random_range(0.0..0.25);
                bs.push(random_box(&mut rng, spec.stage1_size, conf));
            }
        } else {
            for _ in 0..rng.random_range(1..5) {
                let conf = rng.random_range(0.25..=1.0);
                bs.push(random_box(&mut rng, spec.stage1_size, conf));
            }
            for _ in 0..rng.random_range(0..2) {
                let conf = rng.random_range(0.0..0.25);
                bs.push(random_box(&mut rng, spec.stage1_size, conf));
            }
            for r in 0..bs.len() {
                let peak = if rng.random_bool(spec.noise) { rng.random_range(0..k) } else { class_idx };
                dists.insert(format!("{id}.roi{r}"), dist_peaked_at(&mut rng, k, peak));
            }
        }
        entries.push(ManifestEntry {
            image_id: id.clone(),
            path: format!("{id}.png"),
            label,
            field: format!("field{}", i % 5),
            split: if i % 5 == 4 { Split::Train } else { Split::Test },
            boxes: None,
            tags: vec![],
        });
        images.insert(id.clone(), img);
        boxes.insert(id, bs);
    }

    let manifest = Manifest::new(spec.crop, entries);
    let manifest_path = dir.path().join("manifest.jsonl");
    save_manifest(&manifest, &manifest_path).unwrap();
    let detector_fixture = dir.path().join("detector.json");
    std::fs::write(&detector_fixture, serde_json::to_string(&boxes).unwrap()).unwrap();
    let classifier_fixture = dir.path().join("classifier.json");
    std::fs::write(&classifier_fixture, serde_json::to_string(&dists).unwrap()).unwrap();
    let mut manifest = manifest;
    manifest.base_dir = dir.path().to_path_buf();

    Synth { dir, manifest_path, detector_fixture, classifier_fixture, manifest, images, boxes, dists }
}

/// Runs the `plantdx` binary.
pub fn plantdx(args: &[&str], cwd: &Path) -> std::process::Output {
    std::process::Command::new(PLANTDX).args(args).current_dir(cwd).output().expect("spawn plantdx")
}

pub fn sidecar_cmd(kind: &str, fixture: &Path, extra: &[&str]) -> Vec<String> {
    let mut v =
        vec![SIDECAR.to_string(), "--kind".into(), kind.into(), "--fixture".into(), fixture.display().to_string()];
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

pub fn class_ids(crop: Crop) -> Vec<ClassId> {
    crop_taxonomy(crop).ids()
}
