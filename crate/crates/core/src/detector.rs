//! Object detections for the object-oriented filtering stage.
//!
//! A [`DetectionProvider`] maps an image plus a text prompt (the
//! metacategory, e.g. "bird") to scored boxes. Three implementations are
//! provided: JSON sidecar fixtures, a remote HTTP service, and a
//! persistent cache wrapping either.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ProviderError;

/// Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl PixelBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self::new(0.0, 0.0, width as f64, height as f64)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn clamp_to(&self, width: u32, height: u32) -> Self {
        let (w, h) = (width as f64, height as f64);
        Self::new(
            self.x1.clamp(0.0, w),
            self.y1.clamp(0.0, h),
            self.x2.clamp(0.0, w),
            self.y2.clamp(0.0, h),
        )
    }

    pub fn contains(&self, other: &PixelBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub score: f64,
    pub prompt: String,
}

/// Body shared by sidecar fixtures and the HTTP service response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionPayload {
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
}

impl DetectionPayload {
    /// Validates the payload and converts it into results clamped to the
    /// image and sorted by descending score.
    pub fn into_results(
        self,
        prompt: &str,
        width: u32,
        height: u32,
    ) -> Result<Vec<DetectionResult>, String> {
        if self.boxes.len() != self.scores.len() {
            return Err(format!(
                "{} boxes but {} scores",
                self.boxes.len(),
                self.scores.len()
            ));
        }
        let mut out = Vec::with_capacity(self.boxes.len());
        for (b, score) in self.boxes.into_iter().zip(self.scores) {
            if !(0.0..=1.0).contains(&score) {
                return Err(format!("confidence {score} outside [0, 1]"));
            }
            let raw = PixelBox::new(b[0], b[1], b[2], b[3]);
            if !raw.is_valid() {
                return Err(format!("box {b:?} is not ordered x1<x2, y1<y2"));
            }
            let bbox = raw.clamp_to(width, height);
            if !bbox.is_valid() {
                return Err(format!("box {b:?} lies outside the {width}x{height} image"));
            }
            out.push(DetectionResult {
                bbox,
                score,
                prompt: prompt.to_string(),
            });
        }
        sort_by_score(&mut out);
        Ok(out)
    }
}

/// Stable sort, highest score first.
pub fn sort_by_score(detections: &mut [DetectionResult]) {
    detections.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// The detection consumed downstream: highest score, then larger area,
/// then lower `x1`.
pub fn top_detection(detections: &[DetectionResult]) -> Option<&DetectionResult> {
    detections.iter().min_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.bbox.area().total_cmp(&a.bbox.area()))
            .then(a.bbox.x1.total_cmp(&b.bbox.x1))
    })
}

pub trait DetectionProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Detections for `image`, ordered by descending score. `image_id`
    /// identifies the image for fixture lookup and caching.
    fn detect(
        &self,
        image_id: &str,
        image: &RgbImage,
        prompt: &str,
    ) -> Result<Vec<DetectionResult>, ProviderError>;
}

impl<P: DetectionProvider + ?Sized> DetectionProvider for Box<P> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn detect(
        &self,
        image_id: &str,
        image: &RgbImage,
        prompt: &str,
    ) -> Result<Vec<DetectionResult>, ProviderError> {
        (**self).detect(image_id, image, prompt)
    }
}

/// Reads `<root>/<image_id>.json` sidecars.
#[derive(Debug, Clone)]
pub struct FixtureProvider {
    root: PathBuf,
}

impl FixtureProvider {
    pub fn new(sidecar_root: impl Into<PathBuf>) -> Self {
        Self {
            root: sidecar_root.into(),
        }
    }

    pub fn sidecar_path(&self, image_id: &str) -> PathBuf {
        self.root.join(format!("{image_id}.json"))
    }
}

impl DetectionProvider for FixtureProvider {
    fn name(&self) -> &str {
        "fixture"
    }

    fn detect(
        &self,
        image_id: &str,
        image: &RgbImage,
        prompt: &str,
    ) -> Result<Vec<DetectionResult>, ProviderError> {
        let path = self.sidecar_path(image_id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => {
                return Err(ProviderError::Malformed {
                    path,
                    reason: e.to_string(),
                })
            }
        };
        let malformed = |reason: String| ProviderError::Malformed {
            path: path.clone(),
            reason,
        };
        let payload: DetectionPayload =
            serde_json::from_slice(&bytes).map_err(|e| malformed(e.to_string()))?;
        payload
            .into_results(prompt, image.width(), image.height())
            .map_err(malformed)
    }
}

/// Posts `{prompt, image_b64}` to a detection service.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    endpoint: String,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct DetectRequest<'a> {
    prompt: &'a str,
    image_b64: String,
}

impl HttpProvider {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
        }
    }
}

pub fn encode_png_base64(image: &RgbImage) -> Result<String, ProviderError> {
    let mut png = Vec::new();
    image
        .write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|e| ProviderError::Transport(format!("png encoding failed: {e}")))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(png))
}

impl DetectionProvider for HttpProvider {
    fn name(&self) -> &str {
        "http"
    }

    fn detect(
        &self,
        _image_id: &str,
        image: &RgbImage,
        prompt: &str,
    ) -> Result<Vec<DetectionResult>, ProviderError> {
        let request = DetectRequest {
            prompt,
            image_b64: encode_png_base64(image)?,
        };
        let mut response = self
            .agent
            .post(&self.endpoint)
            .send_json(&request)
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(ProviderError::Status { status });
        }
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let payload: DetectionPayload =
            serde_json::from_str(&body).map_err(|e| ProviderError::Schema(e.to_string()))?;
        payload
            .into_results(prompt, image.width(), image.height())
            .map_err(ProviderError::Schema)
    }
}

/// Memoizes another provider on disk, one JSON file per
/// (provider name, prompt, image id) under a two-level hash directory.
#[derive(Debug)]
pub struct CachedProvider<P> {
    inner: P,
    dir: PathBuf,
    name: String,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    provider: String,
    prompt: String,
    image_id: String,
    detections: Vec<DetectionResult>,
}

impl<P: DetectionProvider> CachedProvider<P> {
    pub fn new(inner: P, cache_dir: impl Into<PathBuf>) -> Result<Self, ProviderError> {
        let dir = cache_dir.into();
        let unavailable = |reason: String| ProviderError::Cache {
            path: dir.clone(),
            reason,
        };
        fs::create_dir_all(&dir).map_err(|e| unavailable(e.to_string()))?;
        let probe = dir.join(format!(".probe{}", std::process::id()));
        fs::write(&probe, b"").map_err(|e| unavailable(e.to_string()))?;
        let _ = fs::remove_file(&probe);
        let name = format!("cached:{}", inner.name());
        Ok(Self { inner, dir, name })
    }

    pub fn entry_path(&self, image_id: &str, prompt: &str) -> PathBuf {
        let mut hasher = Sha256::new();
        for part in [self.inner.name(), prompt, image_id] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        let key: String = hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn into_inner(self) -> P {
        self.inner
    }

    fn store(&self, path: &Path, entry: &CacheEntry) -> Result<(), ProviderError> {
        let bytes = serde_json::to_vec_pretty(entry)
            .map_err(|e| ProviderError::Schema(e.to_string()))?;
        crate::io::write_atomic(path, &bytes).map_err(|e| ProviderError::Cache {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

impl<P: DetectionProvider> DetectionProvider for CachedProvider<P> {
    fn name(&self) -> &str {
        &self.name
    }

    fn detect(
        &self,
        image_id: &str,
        image: &RgbImage,
        prompt: &str,
    ) -> Result<Vec<DetectionResult>, ProviderError> {
        let path = self.entry_path(image_id, prompt);
        if let Ok(bytes) = fs::read(&path) {
            let entry: CacheEntry =
                serde_json::from_slice(&bytes).map_err(|e| ProviderError::Malformed {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            return Ok(entry.detections);
        }
        let detections = self.inner.detect(image_id, image, prompt)?;
        self.store(
            &path,
            &CacheEntry {
                provider: self.inner.name().to_string(),
                prompt: prompt.to_string(),
                image_id: image_id.to_string(),
                detections: detections.clone(),
            },
        )?;
        Ok(detections)
    }
}
