use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use dvf::config::RunConfig;
use dvf::dataset::Split;
use dvf::detector::{DetectionProvider, DetectionResult, FixtureProvider};
use dvf::pipeline::{self, Layout, CROPS_FILE};
use dvf::synth::{generate, SynthConfig};
use dvf::{DvfError, ProviderError};
use image::RgbImage;

fn corpus(dir: &Path) -> PathBuf {
    let cfg = SynthConfig {
        classes: 3,
        per_class: 6,
        image_size: 64,
        clutter: 3,
        ..SynthConfig::default()
    };
    generate(&cfg, &dir.join("synth")).unwrap();
    dir.join("synth")
}

fn run_config(synth: &Path, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.output_dir = out.to_path_buf();
    cfg.dataset.root = synth.join("images");
    cfg.ovf.fixture_dir = synth.join("detections");
    cfg.model.image_size = 32;
    cfg.model.patch_size = 8;
    cfg.model.depth = 2;
    cfg.model.dim = 16;
    cfg.model.heads = 2;
    cfg.model.k = 6;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 6;
    cfg.train.lr = 1e-3;
    cfg.eval.ks = vec![1, 2];
    cfg.eval.batch_size = 4;
    cfg.validate().unwrap();
    cfg
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn passthrough_preprocessing_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let synth = corpus(dir.path());
    let mut cfg = run_config(&synth, &dir.path().join("out"));
    cfg.ovf.enabled = true;
    // No sidecars: every image falls back to the original.
    cfg.ovf.fixture_dir = dir.path().join("none");
    let manifest = pipeline::raw_manifest(&cfg).unwrap();
    let provider = pipeline::make_provider(&cfg).unwrap();
    let summary = pipeline::preprocess(&cfg, &manifest, provider.as_ref()).unwrap();
    assert_eq!((summary.total, summary.used_detection, summary.passthrough), (18, 0, 18));
    assert_eq!(tree(&Layout::new(&cfg).processed_images()), tree(&synth.join("images")));
}

#[test]
fn fixture_detections_drive_crops_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let synth = corpus(dir.path());
    let mut cfg = run_config(&synth, &dir.path().join("out"));
    cfg.ovf.enabled = true;
    cfg.ovf.alpha = 0.5;
    let manifest = pipeline::raw_manifest(&cfg).unwrap();
    let provider = pipeline::make_provider(&cfg).unwrap();
    let summary = pipeline::preprocess(&cfg, &manifest, provider.as_ref()).unwrap();
    let crops: Vec<pipeline::CropEntry> =
        serde_json::from_slice(&std::fs::read(Layout::new(&cfg).preprocess_dir().join(CROPS_FILE)).unwrap()).unwrap();
    assert_eq!(summary.total, 18);
    assert_eq!(summary.used_detection, crops.iter().filter(|c| c.used_detection).count());
    assert!(summary.used_detection > 0);
    assert!(summary.line().contains("18 images"));
    for c in crops.iter().filter(|c| c.used_detection) {
        let img = image::open(Layout::new(&cfg).processed_images().join(&c.output)).unwrap();
        assert_eq!((img.width(), img.height()), c.padded_size);
        assert_eq!(c.padded_size.0 * 4, c.padded_size.1 * 3);
    }
}

/// Fails every call after the first `ok` ones.
struct Flaky {
    inner: FixtureProvider,
    ok: usize,
    calls: AtomicUsize,
}

impl DetectionProvider for Flaky {
    fn name(&self) -> &str {
        "flaky"
    }

    fn detect(&self, id: &str, image: &RgbImage, prompt: &str) -> Result<Vec<DetectionResult>, ProviderError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.ok {
            return Err(ProviderError::Transport("connection reset".into()));
        }
        self.inner.detect(id, image, prompt)
    }
}

#[test]
fn interrupted_preprocessing_resumes_to_the_same_result() {
    let dir = tempfile::tempdir().unwrap();
    let synth = corpus(dir.path());
    let mut cfg = run_config(&synth, &dir.path().join("resumed"));
    cfg.ovf.enabled = true;
    let manifest = pipeline::raw_manifest(&cfg).unwrap();
    let flaky = Flaky {
        inner: FixtureProvider::new(&cfg.ovf.fixture_dir),
        ok: 7,
        calls: AtomicUsize::new(0),
    };
    let err = pipeline::preprocess(&cfg, &manifest, &flaky).unwrap_err();
    assert!(matches!(err, DvfError::Provider(ProviderError::Transport(_))));
    assert_eq!(err.exit_code(), 4);
    let resumed = pipeline::preprocess(&cfg, &manifest, &FixtureProvider::new(&cfg.ovf.fixture_dir)).unwrap();
    assert_eq!(resumed.processed_now, 11);

    let mut fresh = cfg.clone();
    fresh.output_dir = dir.path().join("fresh");
    let once = pipeline::preprocess(&fresh, &manifest, &FixtureProvider::new(&cfg.ovf.fixture_dir)).unwrap();
    assert_eq!(once.processed_now, 18);
    assert_eq!((once.used_detection, once.passthrough), (resumed.used_detection, resumed.passthrough));
    assert_eq!(
        tree(&Layout::new(&cfg).processed_images()),
        tree(&Layout::new(&fresh).processed_images())
    );
}

#[test]
fn stages_require_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let synth = corpus(dir.path());
    let mut cfg = run_config(&synth, &dir.path().join("out"));
    assert!(matches!(pipeline::embed(&cfg, Split::Test), Err(DvfError::Configuration(_))));
    assert!(matches!(pipeline::eval(&cfg), Err(DvfError::Configuration(_))));
    cfg.ovf.enabled = true;
    let err = pipeline::working_manifest(&cfg).unwrap_err();
    assert!(err.to_string().contains("preprocess"), "{err}");
}

#[test]
fn train_embed_eval_retrieve_round() {
    let dir = tempfile::tempdir().unwrap();
    let synth = corpus(dir.path());
    let cfg = run_config(&synth, &dir.path().join("out"));
    let outcome = pipeline::train(&cfg).unwrap();
    assert_eq!(outcome.steps.len(), 2 * 2);

    let (path, store) = pipeline::embed(&cfg, Split::Test).unwrap();
    assert!(path.exists());
    assert_eq!(store.len(), 9);

    let report = pipeline::eval(&cfg).unwrap();
    let stored = pipeline::load_eval_report(&cfg).unwrap();
    assert_eq!(stored, report);
    assert_eq!(stored.config_snapshot["train"]["epochs"], 2);
    let table = report.table();
    for (k, r) in &report.recall_at {
        assert!(table.contains(&format!("Recall@{k}")));
        assert!(table.contains(&format!("{:.1}", 100.0 * r)));
    }

    let query_id = store.ids()[0].clone();
    let manifest = pipeline::working_manifest(&cfg).unwrap();
    let query = manifest.records.iter().find(|r| r.id == query_id).unwrap().path.clone();
    let hits = pipeline::retrieve(&cfg, &query, 8).unwrap();
    assert_eq!(hits.len(), 8);
    assert!(hits.iter().all(|h| h.id != query_id));
    for w in hits.windows(2) {
        assert!(w[0].similarity >= w[1].similarity);
    }
    assert!(matches!(pipeline::retrieve(&cfg, &query, 9), Err(DvfError::Configuration(_))));

    let viz = pipeline::viz_tokens(&cfg, &query).unwrap();
    assert_eq!(viz.with_importance.ids.len(), 6);
    assert!(viz.overlay_with.exists() && viz.overlay_without.exists());
}
