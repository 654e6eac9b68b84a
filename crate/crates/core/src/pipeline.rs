//! Command implementations shared by the CLI: each reads a [`RunConfig`]
//! and writes its artifacts under `output_dir`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use candle_core::{DType, Device};
use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::checkpoint::NamedTensors;
use crate::config::{ProviderKind, RunConfig};
use crate::dataset::{self, build_manifest, DatasetManifest, Split};
use crate::detector::{CachedProvider, DetectionProvider, FixtureProvider, HttpProvider};
use crate::error::{DvfError, Result};
use crate::io::{read_json, write_atomic, write_json};
use crate::model::DvfModel;
use crate::ovf::{apply_ovf, PixelRect};
use crate::retrieval::{embed_corpus, recall_at_k, search, EmbeddingStore, EvalReport};
use crate::svf::{self, SvfHook, SvfSelection};
use crate::training::{self, TrainOutcome, CHECKPOINT_FILE};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CROPS_FILE: &str = "crops.json";
pub const PROGRESS_FILE: &str = "progress.jsonl";
pub const RUN_FILE: &str = "run.json";

/// Standard artifact locations below `output_dir`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.output_dir.clone(),
        }
    }

    pub fn preprocess_dir(&self) -> PathBuf {
        self.root.join("preprocess")
    }

    pub fn processed_images(&self) -> PathBuf {
        self.preprocess_dir().join("images")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.train_dir().join(CHECKPOINT_FILE)
    }

    pub fn store(&self, split: Split) -> PathBuf {
        let name = match split {
            Split::Train => "train.dvfe",
            Split::Test => "test.dvfe",
        };
        self.root.join("embed").join(name)
    }

    pub fn eval_report(&self) -> PathBuf {
        self.root.join("eval").join("report.json")
    }

    pub fn command_dir(&self, command: &str) -> PathBuf {
        self.root.join(command)
    }
}

#[derive(Serialize)]
struct RunSnapshot<'a> {
    command: &'a str,
    args: &'a serde_json::Value,
    config: &'a RunConfig,
}

/// Records what is needed to re-run `command` in `<output_dir>/<command>/run.json`.
pub fn write_run_snapshot(cfg: &RunConfig, command: &str, args: serde_json::Value) -> Result<()> {
    let path = Layout::new(cfg).command_dir(command).join(RUN_FILE);
    write_json(
        &path,
        &RunSnapshot {
            command,
            args: &args,
            config: cfg,
        },
    )
}

fn device() -> Device {
    Device::Cpu
}

/// The manifest built straight from `dataset.root`.
pub fn raw_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    build_manifest(
        &cfg.dataset.root,
        cfg.dataset.split_mode,
        cfg.dataset.fraction,
        &cfg.dataset.meta_category,
    )
}

/// The manifest the model consumes: the preprocessed one when OVF is on.
pub fn working_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    if cfg.ovf.enabled {
        let path = Layout::new(cfg).preprocess_dir().join(MANIFEST_FILE);
        if !path.exists() {
            return Err(DvfError::Configuration(format!(
                "OVF is enabled but {} does not exist; run `dvf preprocess` first",
                path.display()
            )));
        }
        DatasetManifest::load(&path)
    } else {
        raw_manifest(cfg)
    }
}

pub fn make_provider(cfg: &RunConfig) -> Result<Box<dyn DetectionProvider>> {
    let base: Box<dyn DetectionProvider> = match cfg.ovf.provider {
        ProviderKind::Fixture => Box::new(FixtureProvider::new(&cfg.ovf.fixture_dir)),
        ProviderKind::Http => Box::new(HttpProvider::new(
            cfg.ovf.endpoint.clone(),
            Duration::from_secs_f64(cfg.ovf.timeout_secs),
        )),
    };
    if cfg.ovf.cache_dir.as_os_str().is_empty() {
        Ok(base)
    } else {
        Ok(Box::new(CachedProvider::new(base, &cfg.ovf.cache_dir)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropEntry {
    pub id: String,
    pub used_detection: bool,
    pub source_box: PixelRect,
    pub padded_size: (u32, u32),
    pub score: Option<f64>,
    /// Written file, relative to the processed image root.
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub total: usize,
    pub used_detection: usize,
    pub passthrough: usize,
    /// Images handled by this invocation (the rest were already done).
    pub processed_now: usize,
}

impl PreprocessSummary {
    pub fn line(&self) -> String {
        let rate = if self.total == 0 {
            0.0
        } else {
            100.0 * self.used_detection as f64 / self.total as f64
        };
        format!(
            "preprocessed {} images: {} cropped, {} passed through ({rate:.1}% used detection)",
            self.total, self.used_detection, self.passthrough
        )
    }
}

fn record_relative_path(root: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(root)
        .map(Path::to_path_buf)
        .unwrap_or_else(|_| PathBuf::from(path.file_name().unwrap_or_default()))
}

fn read_progress(path: &Path) -> Result<HashMap<String, CropEntry>> {
    let mut done = HashMap::new();
    let Ok(file) = fs::File::open(path) else {
        return Ok(done);
    };
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| DvfError::io(path, e))?;
        // A torn final line from an interrupted run is simply redone.
        if let Ok(entry) = serde_json::from_str::<CropEntry>(&line) {
            done.insert(entry.id.clone(), entry);
        }
    }
    Ok(done)
}

/// Runs OVF over every record. Passthrough images are byte-copied;
/// cropped ones are written as PNG. Progress is appended per image, so a
/// run aborted by a provider failure resumes where it stopped.
pub fn preprocess(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    provider: &dyn DetectionProvider,
) -> Result<PreprocessSummary> {
    let ovf = cfg.ovf.ovf_config();
    ovf.validate()?;
    let layout = Layout::new(cfg);
    let dir = layout.preprocess_dir();
    let images = layout.processed_images();
    fs::create_dir_all(&images).map_err(|e| DvfError::io(&images, e))?;
    let progress_path = dir.join(PROGRESS_FILE);
    let mut done = read_progress(&progress_path)?;
    let mut progress = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&progress_path)
        .map_err(|e| DvfError::io(&progress_path, e))?;

    let mut processed_now = 0;
    for record in &manifest.records {
        if done.contains_key(&record.id) {
            continue;
        }
        let rel = record_relative_path(&cfg.dataset.root, &record.path);
        let image = dataset::load_rgb(&record.path)?;
        let detections = provider.detect(&record.id, &image, &manifest.meta_category)?;
        let (out_img, spec) = apply_ovf(&image, &detections, &ovf)?;
        let output = if spec.used_detection {
            let rel = rel.with_extension("png");
            let mut bytes = Vec::new();
            out_img
                .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
                .map_err(|e| DvfError::Data(format!("cannot encode {}: {e}", rel.display())))?;
            write_atomic(&images.join(&rel), &bytes)?;
            rel
        } else {
            let bytes = fs::read(&record.path).map_err(|e| DvfError::io(&record.path, e))?;
            write_atomic(&images.join(&rel), &bytes)?;
            rel
        };
        let entry = CropEntry {
            id: record.id.clone(),
            used_detection: spec.used_detection,
            source_box: spec.source_box,
            padded_size: spec.padded_size,
            score: spec.score,
            output,
        };
        let line = serde_json::to_string(&entry).expect("crop entry serializes");
        writeln!(progress, "{line}").map_err(|e| DvfError::io(&progress_path, e))?;
        progress.flush().map_err(|e| DvfError::io(&progress_path, e))?;
        done.insert(entry.id.clone(), entry);
        processed_now += 1;
    }

    let mut crops = Vec::with_capacity(manifest.records.len());
    let mut processed = manifest.clone();
    for record in processed.records.iter_mut() {
        let entry = done
            .get(&record.id)
            .ok_or_else(|| DvfError::Internal(format!("{} missing from progress", record.id)))?;
        record.path = images.join(&entry.output);
        crops.push(entry.clone());
    }
    write_json(&dir.join(CROPS_FILE), &crops)?;
    processed.save(&dir.join(MANIFEST_FILE))?;
    let used = crops.iter().filter(|c| c.used_detection).count();
    Ok(PreprocessSummary {
        total: crops.len(),
        used_detection: used,
        passthrough: crops.len() - used,
        processed_now,
    })
}

/// Fresh model from the config, optionally seeded with pretrained weights.
pub fn init_model(cfg: &RunConfig) -> Result<DvfModel> {
    let model = DvfModel::new(cfg.model.model_config(), cfg.train.seed, DType::F32, &device())?;
    if let Some(path) = &cfg.model.pretrained {
        let tensors = NamedTensors::load(path)?;
        let prefix = if tensors.get("encoder.cls_token").is_some() {
            "encoder."
        } else {
            ""
        };
        model.encoder.load_tensors(&tensors, prefix)?;
    }
    Ok(model)
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let manifest = working_manifest(cfg)?;
    manifest.save(&Layout::new(cfg).root.join(MANIFEST_FILE))?;
    let model = init_model(cfg)?;
    training::train(&model, &manifest, &cfg.train.train_config(), &Layout::new(cfg).train_dir())
}

pub fn load_trained(cfg: &RunConfig) -> Result<DvfModel> {
    let path = Layout::new(cfg).checkpoint();
    if !path.exists() {
        return Err(DvfError::Configuration(format!(
            "no checkpoint at {}; run `dvf train` first",
            path.display()
        )));
    }
    DvfModel::load(&path, DType::F32, &device())
}

pub fn embed(cfg: &RunConfig, split: Split) -> Result<(PathBuf, EmbeddingStore)> {
    let model = load_trained(cfg)?;
    let manifest = working_manifest(cfg)?;
    let records: Vec<_> = manifest.split(split).collect();
    let store = embed_corpus(&records, &model, cfg.eval.batch_size)?;
    let path = Layout::new(cfg).store(split);
    store.save(&path)?;
    Ok((path, store))
}

fn load_store(cfg: &RunConfig, split: Split) -> Result<EmbeddingStore> {
    let path = Layout::new(cfg).store(split);
    if !path.exists() {
        return Err(DvfError::Configuration(format!(
            "no embedding store at {}; run `dvf embed` first",
            path.display()
        )));
    }
    EmbeddingStore::load(&path)
}

/// Recall@K over the stored test embeddings; writes the report JSON.
pub fn eval(cfg: &RunConfig) -> Result<EvalReport> {
    let store = load_store(cfg, Split::Test)?;
    let mut report = recall_at_k(&store, &cfg.eval.ks)?;
    report.config_snapshot = serde_json::to_value(cfg).expect("config serializes");
    write_json(&Layout::new(cfg).eval_report(), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub id: String,
    pub label: usize,
    pub similarity: f64,
}

/// Top `k` store entries for a query image. A query that is itself in
/// the store (matched by path) is excluded from its own results.
pub fn retrieve(cfg: &RunConfig, query: &Path, k: usize) -> Result<Vec<RetrievalHit>> {
    let model = load_trained(cfg)?;
    let store = load_store(cfg, Split::Test)?;
    let manifest = working_manifest(cfg)?;
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let query_canon = canon(query);
    let raw = if cfg.ovf.enabled { raw_manifest(cfg).ok() } else { None };
    let mut self_id = None;
    let mut source = query.to_path_buf();
    for record in &manifest.records {
        let raw_path = raw
            .as_ref()
            .and_then(|m| m.records.iter().find(|r| r.id == record.id))
            .map(|r| canon(&r.path));
        if canon(&record.path) == query_canon || raw_path.as_ref() == Some(&query_canon) {
            self_id = Some(record.id.clone());
            source = record.path.clone();
            break;
        }
    }
    let image = dataset::load_rgb(&source)?;
    let row = model
        .embed_views(&[model.eval_view(&image)], 1)?
        .pop()
        .ok_or_else(|| DvfError::Internal("no embedding produced".into()))?;
    let exclude = self_id.as_deref().and_then(|id| store.position(id));
    let available = store.len() - usize::from(exclude.is_some());
    if k == 0 || k > available {
        return Err(DvfError::Configuration(format!(
            "top-k must be in 1..={available}, got {k}"
        )));
    }
    Ok(search(&store, &row, k, exclude)
        .into_iter()
        .map(|(i, s)| RetrievalHit {
            id: store.ids()[i].clone(),
            label: store.labels()[i],
            similarity: s,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Ovf,
    Svf,
    Dmt,
    ImportanceGenerator,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Ovf => "ovf",
            Component::Svf => "svf",
            Component::Dmt => "dmt",
            Component::ImportanceGenerator => "importance_generator",
        }
    }

    fn set(self, cfg: &mut RunConfig, on: bool) {
        match self {
            Component::Ovf => cfg.ovf.enabled = on,
            Component::Svf => cfg.model.svf_enabled = on,
            Component::Dmt => cfg.train.dmt = on,
            Component::ImportanceGenerator => cfg.model.importance_generator = on,
        }
    }
}

impl std::str::FromStr for Component {
    type Err = DvfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ovf" => Ok(Component::Ovf),
            "svf" => Ok(Component::Svf),
            "dmt" => Ok(Component::Dmt),
            "importance_generator" | "omega" => Ok(Component::ImportanceGenerator),
            other => Err(DvfError::Configuration(format!(
                "unknown ablation toggle `{other}` (expected ovf, svf, dmt, importance_generator)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub enabled: Vec<String>,
    pub k: Option<usize>,
    pub recall_at: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub k_sweep: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let ks: Vec<usize> = self
            .rows
            .iter()
            .chain(&self.k_sweep)
            .flat_map(|r| r.recall_at.keys().copied())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let width = self
            .rows
            .iter()
            .chain(&self.k_sweep)
            .map(|r| r.variant.len())
            .max()
            .unwrap_or(8)
            .max(8);
        let mut out = format!("{:<width$}", "variant");
        for k in &ks {
            out.push_str(&format!(" {:>9}", format!("Recall@{k}")));
        }
        out.push('\n');
        for row in self.rows.iter().chain(&self.k_sweep) {
            out.push_str(&format!("{:<width$}", row.variant));
            for k in &ks {
                match row.recall_at.get(k) {
                    Some(r) => out.push_str(&format!(" {:>9.1}", 100.0 * r)),
                    None => out.push_str(&format!(" {:>9}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Baseline has every toggled component off; components outside the
/// toggle set keep their configured value.
pub fn ablation_variants(cfg: &RunConfig, toggles: &[Component]) -> Vec<(String, RunConfig)> {
    let mut toggles = toggles.to_vec();
    toggles.sort();
    toggles.dedup();
    let mut base = cfg.clone();
    for t in &toggles {
        t.set(&mut base, false);
    }
    let mut out = vec![("baseline".to_string(), base.clone())];
    for t in &toggles {
        let mut v = base.clone();
        t.set(&mut v, true);
        out.push((format!("+{}", t.name()), v));
    }
    if toggles.len() > 1 {
        let mut v = base;
        for t in &toggles {
            t.set(&mut v, true);
        }
        out.push(("full".to_string(), v));
    }
    out
}

fn enabled_components(cfg: &RunConfig) -> Vec<String> {
    let mut on = Vec::new();
    if cfg.ovf.enabled {
        on.push("ovf".to_string());
    }
    if cfg.model.svf_enabled {
        on.push("svf".to_string());
    }
    if cfg.train.dmt {
        on.push("dmt".to_string());
    }
    if cfg.model.svf_enabled && cfg.model.importance_generator {
        on.push("importance_generator".to_string());
    }
    on
}

/// Trains, embeds and evaluates one variant in its own output directory.
/// OVF variants reuse the preprocessed tree of `shared`.
fn run_variant(cfg: &RunConfig, shared: &Path) -> Result<BTreeMap<usize, f64>> {
    if cfg.ovf.enabled {
        let src = shared.join("preprocess").join(MANIFEST_FILE);
        let dst = Layout::new(cfg).preprocess_dir().join(MANIFEST_FILE);
        let manifest = DatasetManifest::load(&src)?;
        manifest.save(&dst)?;
    }
    train(cfg)?;
    embed(cfg, Split::Test)?;
    Ok(eval(cfg)?.recall_at)
}

pub fn ablate(cfg: &RunConfig, toggles: &[Component], k_sweep: &[usize]) -> Result<AblationReport> {
    let root = Layout::new(cfg).command_dir("ablate");
    let variants = ablation_variants(cfg, toggles);
    let needs_ovf = variants.iter().any(|(_, v)| v.ovf.enabled) || (!k_sweep.is_empty() && cfg.ovf.enabled);
    if needs_ovf {
        let mut shared = cfg.clone();
        shared.output_dir = root.clone();
        let provider = make_provider(&shared)?;
        let summary = preprocess(&shared, &raw_manifest(&shared)?, provider.as_ref())?;
        log::info!("{}", summary.line());
    }
    let mut rows = Vec::new();
    for (name, mut v) in variants {
        v.output_dir = root.join(name.trim_start_matches('+'));
        log::info!("ablation variant {name}");
        let recall_at = run_variant(&v, &root)?;
        rows.push(AblationRow {
            variant: name,
            enabled: enabled_components(&v),
            k: v.model.svf_enabled.then_some(v.model.k),
            recall_at,
        });
    }
    let mut sweep = Vec::new();
    for &k in k_sweep {
        let mut v = cfg.clone();
        v.model.svf_enabled = true;
        v.model.k = k;
        v.validate()?;
        v.output_dir = root.join(format!("k{k}"));
        log::info!("k sweep k = {k}");
        let recall_at = run_variant(&v, &root)?;
        sweep.push(AblationRow {
            variant: format!("k={k}"),
            enabled: enabled_components(&v),
            k: Some(k),
            recall_at,
        });
    }
    let report = AblationReport { rows, k_sweep: sweep };
    write_json(&root.join("report.json"), &report)?;
    if !report.k_sweep.is_empty() {
        let curve: Vec<_> = report
            .k_sweep
            .iter()
            .map(|r| serde_json::json!({"k": r.k, "recall_at": r.recall_at}))
            .collect();
        write_json(&root.join("k_sweep.json"), &curve)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenViz {
    pub image: PathBuf,
    pub grid: usize,
    pub with_importance: SvfSelection,
    pub without_importance: SvfSelection,
    pub overlay_with: PathBuf,
    pub overlay_without: PathBuf,
}

/// Dims unselected patches and outlines selected ones.
pub fn render_overlay(view: &RgbImage, ids: &[usize], grid: usize, patch: usize) -> RgbImage {
    let mut out = view.clone();
    let selected: std::collections::HashSet<usize> = ids.iter().copied().collect();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let (gx, gy) = (x as usize / patch, y as usize / patch);
        if gx >= grid || gy >= grid {
            continue;
        }
        if selected.contains(&(gy * grid + gx)) {
            let (lx, ly) = (x as usize % patch, y as usize % patch);
            if lx == 0 || ly == 0 || lx == patch - 1 || ly == patch - 1 {
                *p = Rgb([255, 32, 32]);
            }
        } else {
            *p = Rgb(p.0.map(|c| (c as f32 * 0.3) as u8));
        }
    }
    out
}

/// Token selection for one image, with and without the importance
/// generator, written as overlay PNGs plus JSON under `viz/`.
pub fn viz_tokens(cfg: &RunConfig, image_path: &Path) -> Result<TokenViz> {
    let model = load_trained(cfg)?;
    let enc = &model.config().encoder;
    let view = model.eval_view(&dataset::load_rgb(image_path)?);
    let x = crate::encoder::images_to_tensor(std::slice::from_ref(&view), model.dtype(), model.device())?;
    let state = model.encoder.forward_to_penultimate(&x)?;
    let k = model.config().effective_k().max(1);
    let pick = |hook: SvfHook| -> Result<SvfSelection> {
        let (_, mut sel) = svf::filter(&hook, &state)?;
        sel.pop().ok_or_else(|| DvfError::Internal("empty selection".into()))
    };
    let with_importance = pick(SvfHook::new(k, Some(&model.importance)))?;
    let without_importance = pick(SvfHook::new(k, None))?;
    let dir = Layout::new(cfg).command_dir("viz");
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let mut paths = Vec::new();
    for (suffix, sel) in [("with", &with_importance), ("without", &without_importance)] {
        let img = render_overlay(&view, &sel.ids, enc.grid(), enc.patch_size);
        let path = dir.join(format!("{stem}_{suffix}_importance.png"));
        let mut bytes = Vec::new();
        img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
            .map_err(|e| DvfError::Internal(format!("png encode: {e}")))?;
        write_atomic(&path, &bytes)?;
        paths.push(path);
    }
    let viz = TokenViz {
        image: image_path.to_path_buf(),
        grid: enc.grid(),
        with_importance,
        without_importance,
        overlay_without: paths.pop().unwrap(),
        overlay_with: paths.pop().unwrap(),
    };
    write_json(&dir.join(format!("{stem}.json")), &viz)?;
    Ok(viz)
}

/// Reads a stored eval report (for re-printing without recomputation).
pub fn load_eval_report(cfg: &RunConfig) -> Result<EvalReport> {
    read_json(&Layout::new(cfg).eval_report())
}
