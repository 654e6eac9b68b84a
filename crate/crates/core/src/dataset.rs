//! Labeled image corpora: manifests, closed/open-set splits and the
//! training-time augmentation policy.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DvfError, Result};

/// Side length images are resized to before cropping.
pub const RESIZE: u32 = 256;
/// Side length of the square crop fed to the encoder.
pub const CROP: u32 = 224;
/// Smallest accepted image side.
pub const MIN_SIDE: u32 = 32;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Closed,
    Open,
}

impl std::str::FromStr for SplitMode {
    type Err = DvfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" => Ok(SplitMode::Closed),
            "open" => Ok(SplitMode::Open),
            other => Err(DvfError::Configuration(format!(
                "split_mode must be `closed` or `open`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub meta_category: String,
    pub split_mode: SplitMode,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn labels(&self, split: Split) -> BTreeSet<usize> {
        self.split(split).map(|r| r.label).collect()
    }

    /// Checks the split-mode label invariants.
    pub fn validate(&self) -> Result<()> {
        let train = self.labels(Split::Train);
        let test = self.labels(Split::Test);
        match self.split_mode {
            SplitMode::Closed if train != test => Err(DvfError::Manifest(
                "closed-set manifest must carry the same labels on both sides".into(),
            )),
            SplitMode::Open if !train.is_disjoint(&test) => Err(DvfError::Manifest(
                "open-set manifest has labels shared between train and test".into(),
            )),
            _ => {
                let mut ids = BTreeSet::new();
                for r in &self.records {
                    if !ids.insert(r.id.as_str()) {
                        return Err(DvfError::Manifest(format!("duplicate image id {}", r.id)));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| DvfError::Internal(format!("manifest serialization: {e}")))?;
        crate::io::write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| DvfError::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| {
            DvfError::Manifest(format!("cannot parse manifest {}: {e}", path.display()))
        })?;
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Images of one subcategory, in filename order.
#[derive(Debug, Clone)]
pub struct ClassFiles {
    pub name: String,
    pub files: Vec<PathBuf>,
}

/// Scans `root/<class_name>/<image>` and partitions it into a manifest.
pub fn build_manifest(
    root: &Path,
    split_mode: SplitMode,
    split_fraction: f64,
    meta_category: &str,
) -> Result<DatasetManifest> {
    let classes = scan_classes(root)?;
    for class in &classes {
        for file in &class.files {
            let (w, h) = image::image_dimensions(file)
                .map_err(|e| DvfError::Data(format!("cannot decode {}: {e}", file.display())))?;
            if w < MIN_SIDE || h < MIN_SIDE {
                return Err(DvfError::Data(format!(
                    "{} is {w}x{h}, smaller than {MIN_SIDE}x{MIN_SIDE}",
                    file.display()
                )));
            }
        }
    }
    let records = partition(&classes, split_mode, split_fraction)?;
    let manifest = DatasetManifest {
        meta_category: meta_category.to_string(),
        split_mode,
        records,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Lists class subdirectories (lexicographic) and their image files (sorted).
pub fn scan_classes(root: &Path) -> Result<Vec<ClassFiles>> {
    let entries = fs::read_dir(root).map_err(|e| {
        DvfError::Configuration(format!("cannot read dataset root {}: {e}", root.display()))
    })?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| DvfError::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    let mut classes = Vec::new();
    for dir in dirs {
        let mut files = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| DvfError::io(&dir, e))? {
            let path = entry.map_err(|e| DvfError::io(&dir, e))?.path();
            if path.is_file() && has_image_extension(&path) {
                files.push(path);
            }
        }
        if files.is_empty() {
            continue;
        }
        files.sort();
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        classes.push(ClassFiles { name, files });
    }
    if classes.is_empty() {
        return Err(DvfError::Configuration(format!(
            "dataset root {} holds no class directories with images",
            root.display()
        )));
    }
    Ok(classes)
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Assigns labels (class order) and splits without touching the filesystem.
pub fn partition(
    classes: &[ClassFiles],
    split_mode: SplitMode,
    split_fraction: f64,
) -> Result<Vec<ImageRecord>> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(DvfError::Configuration(format!(
            "split fraction must lie in (0, 1), got {split_fraction}"
        )));
    }
    if classes.is_empty() {
        return Err(DvfError::Configuration("no classes to partition".into()));
    }
    let mut records = Vec::new();
    match split_mode {
        SplitMode::Open => {
            let train_classes = open_train_count(classes.len(), split_fraction);
            if train_classes == 0 || train_classes >= classes.len() {
                return Err(DvfError::Manifest(format!(
                    "open split of {} classes at fraction {split_fraction} leaves one side empty",
                    classes.len()
                )));
            }
            for (label, class) in classes.iter().enumerate() {
                let split = if label < train_classes {
                    Split::Train
                } else {
                    Split::Test
                };
                for file in &class.files {
                    records.push(record(class, file, label, split));
                }
            }
        }
        SplitMode::Closed => {
            for (label, class) in classes.iter().enumerate() {
                let n = class.files.len();
                if n < 2 {
                    return Err(DvfError::Manifest(format!(
                        "class `{}` has {n} image(s); closed split needs at least 2",
                        class.name
                    )));
                }
                let train = ((n as f64 * split_fraction).floor() as usize).clamp(1, n - 1);
                for (i, file) in class.files.iter().enumerate() {
                    // Evenly interleaved: position i goes to train when the
                    // running quota i*train/n steps up.
                    let split = if (i + 1) * train / n > i * train / n {
                        Split::Train
                    } else {
                        Split::Test
                    };
                    records.push(record(class, file, label, split));
                }
            }
        }
    }
    Ok(records)
}

fn open_train_count(classes: usize, fraction: f64) -> usize {
    let x = fraction * classes as f64;
    let n = if (x - x.round()).abs() < 1e-9 {
        x.round()
    } else {
        x.ceil()
    };
    n as usize
}

fn record(class: &ClassFiles, file: &Path, label: usize, split: Split) -> ImageRecord {
    let stem = file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ImageRecord {
        id: format!("{}/{}", class.name, stem),
        path: file.to_path_buf(),
        label,
        split,
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| DvfError::Data(format!("cannot decode {}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

/// Color-jitter strengths plus the random grayscale/blur switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_range: (f32, f32),
    pub horizontal_flip: bool,
    pub rng_seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: 0.2,
            blur_sigma_range: (0.1, 2.0),
            horizontal_flip: true,
            rng_seed: 0,
        }
    }
}

impl AugmentationPolicy {
    /// No color change, no grayscale, no blur, no flip.
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            horizontal_flip: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let strengths = [self.brightness, self.contrast, self.saturation, self.hue];
        if strengths.iter().any(|s| !(*s >= 0.0)) {
            return Err(DvfError::Configuration(
                "color-jitter strengths must be >= 0".into(),
            ));
        }
        if self.hue > 0.5 {
            return Err(DvfError::Configuration("hue strength must be <= 0.5".into()));
        }
        for p in [self.grayscale_prob, self.blur_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DvfError::Configuration(format!(
                    "augmentation probability {p} outside [0, 1]"
                )));
            }
        }
        let (lo, hi) = self.blur_sigma_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(DvfError::Configuration(format!(
                "blur sigma range ({lo}, {hi}) must satisfy 0 < min <= max"
            )));
        }
        Ok(())
    }
}

/// Color jitter (always), then grayscale and Gaussian blur each on an
/// independent draw. Output dimensions equal input dimensions.
pub fn augment<R: Rng + ?Sized>(image: &RgbImage, policy: &AugmentationPolicy, rng: &mut R) -> RgbImage {
    let brightness = jitter_factor(policy.brightness, rng);
    let contrast = jitter_factor(policy.contrast, rng);
    let saturation = jitter_factor(policy.saturation, rng);
    let hue_shift = (rng.random::<f32>() * 2.0 - 1.0) * policy.hue;
    let gray_draw = rng.random::<f64>();
    let blur_draw = rng.random::<f64>();
    let sigma_draw = rng.random::<f32>();

    let mut out = color_jitter(image, brightness, contrast, saturation, hue_shift);
    if gray_draw < policy.grayscale_prob {
        out = grayscale(&out);
    }
    if blur_draw < policy.blur_prob {
        let (lo, hi) = policy.blur_sigma_range;
        let sigma = lo + (hi - lo) * sigma_draw;
        out = imageops::blur(&out, sigma);
    }
    out
}

fn jitter_factor<R: Rng + ?Sized>(strength: f32, rng: &mut R) -> f32 {
    let u = rng.random::<f32>();
    (1.0 - strength + 2.0 * strength * u).max(0.0)
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Brightness, contrast, saturation and hue adjustments in that order.
/// Factors of exactly 1 (and a zero hue shift) leave pixels untouched.
pub fn color_jitter(
    image: &RgbImage,
    brightness: f32,
    contrast: f32,
    saturation: f32,
    hue_shift: f32,
) -> RgbImage {
    if brightness == 1.0 && contrast == 1.0 && saturation == 1.0 && hue_shift == 0.0 {
        return image.clone();
    }
    let mut px: Vec<[f32; 3]> = image
        .pixels()
        .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
        .collect();
    if brightness != 1.0 {
        for p in px.iter_mut() {
            for c in p.iter_mut() {
                *c = (*c * brightness).clamp(0.0, 255.0);
            }
        }
    }
    if contrast != 1.0 {
        let mean = px.iter().map(|p| luma(p[0], p[1], p[2])).sum::<f32>() / px.len().max(1) as f32;
        for p in px.iter_mut() {
            for c in p.iter_mut() {
                *c = (contrast * *c + (1.0 - contrast) * mean).clamp(0.0, 255.0);
            }
        }
    }
    if saturation != 1.0 {
        for p in px.iter_mut() {
            let g = luma(p[0], p[1], p[2]);
            for c in p.iter_mut() {
                *c = (saturation * *c + (1.0 - saturation) * g).clamp(0.0, 255.0);
            }
        }
    }
    if hue_shift != 0.0 {
        for p in px.iter_mut() {
            let (h, s, v) = rgb_to_hsv(p[0] / 255.0, p[1] / 255.0, p[2] / 255.0);
            let (r, g, b) = hsv_to_rgb((h + hue_shift).rem_euclid(1.0), s, v);
            *p = [r * 255.0, g * 255.0, b * 255.0];
        }
    }
    let mut out = RgbImage::new(image.width(), image.height());
    for (dst, p) in out.pixels_mut().zip(px) {
        *dst = image::Rgb(p.map(|c| c.round().clamp(0.0, 255.0) as u8));
    }
    out
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

pub fn grayscale(image: &RgbImage) -> RgbImage {
    let mut out = image.clone();
    for p in out.pixels_mut() {
        let g = luma(p[0] as f32, p[1] as f32, p[2] as f32).round().clamp(0.0, 255.0) as u8;
        *p = image::Rgb([g, g, g]);
    }
    out
}

/// Resize to 256x256, then take a 224x224 crop (random offset when
/// `train_mode`, centered otherwise).
pub fn resize_crop<R: Rng + ?Sized>(image: &RgbImage, train_mode: bool, rng: &mut R) -> RgbImage {
    resize_crop_to(image, RESIZE, CROP, train_mode, rng)
}

pub fn resize_crop_to<R: Rng + ?Sized>(
    image: &RgbImage,
    resize: u32,
    crop: u32,
    train_mode: bool,
    rng: &mut R,
) -> RgbImage {
    let resized = if image.dimensions() == (resize, resize) {
        image.clone()
    } else {
        imageops::resize(image, resize, resize, imageops::FilterType::Triangle)
    };
    let slack = resize - crop;
    let (x, y) = if train_mode {
        (rng.random_range(0..=slack), rng.random_range(0..=slack))
    } else {
        (slack / 2, slack / 2)
    };
    imageops::crop_imm(&resized, x, y, crop, crop).to_image()
}

/// Resize side used ahead of a crop of `crop` pixels (256 for 224).
pub fn resize_for_crop(crop: u32) -> u32 {
    (crop * RESIZE).div_ceil(CROP)
}

pub fn hflip(image: &RgbImage) -> RgbImage {
    imageops::flip_horizontal(image)
}
