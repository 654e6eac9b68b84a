//! Object-oriented visual filtering: confidence self-check, box
//! enlargement, crop, and aspect-ratio padding.

use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::detector::{top_detection, DetectionResult, PixelBox};
use crate::error::{DvfError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OvfConfig {
    /// Minimum confidence for a detection to be used.
    pub alpha: f64,
    pub enlarge_factor: f64,
    /// Target width:height ratio.
    pub target_aspect: (u32, u32),
    pub pad_value: [u8; 3],
}

impl Default for OvfConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            enlarge_factor: 1.1,
            target_aspect: (3, 4),
            pad_value: [128, 128, 128],
        }
    }
}

impl OvfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DvfError::Configuration(format!(
                "ovf alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.enlarge_factor >= 1.0 && self.enlarge_factor.is_finite()) {
            return Err(DvfError::Configuration(format!(
                "ovf enlarge factor {} must be >= 1",
                self.enlarge_factor
            )));
        }
        if self.target_aspect.0 == 0 || self.target_aspect.1 == 0 {
            return Err(DvfError::Configuration(
                "ovf target aspect components must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Integer pixel rectangle `[x1, x2) x [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl PixelRect {
    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub source_box: PixelRect,
    pub padded_size: (u32, u32),
    pub used_detection: bool,
    /// Confidence of the top detection, if any.
    pub score: Option<f64>,
}

/// Scales the box about its center by `factor` and clamps it to the image.
///
/// The margin added to each side is `extent * (factor - 1) / 2`, so a
/// factor of 1 is an exact identity and the result is monotone in `factor`.
pub fn enlarge_box(bbox: &PixelBox, factor: f64, image_size: (u32, u32)) -> Result<PixelBox> {
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(DvfError::Configuration(format!(
            "enlarge factor {factor} must be >= 1"
        )));
    }
    if !bbox.is_valid() {
        return Err(DvfError::Geometry(format!(
            "degenerate box {:?}",
            bbox.to_array()
        )));
    }
    let mx = bbox.width() * (factor - 1.0) / 2.0;
    let my = bbox.height() * (factor - 1.0) / 2.0;
    let grown = PixelBox::new(bbox.x1 - mx, bbox.y1 - my, bbox.x2 + mx, bbox.y2 + my);
    let clamped = grown.clamp_to(image_size.0, image_size.1);
    if !clamped.is_valid() {
        return Err(DvfError::Geometry(format!(
            "box {:?} does not intersect the {}x{} image",
            bbox.to_array(),
            image_size.0,
            image_size.1
        )));
    }
    Ok(clamped)
}

/// Rounds a clamped box to the integer rectangle that is cropped.
pub fn crop_rect(bbox: &PixelBox, image_size: (u32, u32)) -> Result<PixelRect> {
    let (w, h) = image_size;
    let x1 = (bbox.x1.round().max(0.0) as u32).min(w);
    let y1 = (bbox.y1.round().max(0.0) as u32).min(h);
    let x2 = (bbox.x2.round().max(0.0) as u32).min(w);
    let y2 = (bbox.y2.round().max(0.0) as u32).min(h);
    if x1 >= x2 || y1 >= y2 {
        return Err(DvfError::Geometry(format!(
            "box {:?} rounds to an empty crop",
            bbox.to_array()
        )));
    }
    Ok(PixelRect { x1, y1, x2, y2 })
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Smallest `(W, H)` with `W >= width`, `H >= height` and
/// `W * hr == H * wr`.
pub fn padded_size(width: u32, height: u32, target_aspect: (u32, u32)) -> (u32, u32) {
    let g = gcd(target_aspect.0, target_aspect.1);
    let (a, b) = (target_aspect.0 / g, target_aspect.1 / g);
    let t = width.div_ceil(a).max(height.div_ceil(b));
    (a * t, b * t)
}

/// Adds margins (odd pixel to the bottom/right) until the image is exactly
/// `target_aspect`. Never crops; an exact input is returned unchanged.
pub fn pad_to_aspect(image: &RgbImage, target_aspect: (u32, u32), pad_value: [u8; 3]) -> RgbImage {
    let (w, h) = image.dimensions();
    let (pw, ph) = padded_size(w, h, target_aspect);
    if (pw, ph) == (w, h) {
        return image.clone();
    }
    let mut out = RgbImage::from_pixel(pw, ph, Rgb(pad_value));
    let left = (pw - w) / 2;
    let top = (ph - h) / 2;
    imageops::replace(&mut out, image, left as i64, top as i64);
    out
}

/// Runs the post-processing pass on one image. Below-threshold or absent
/// detections return the input untouched.
pub fn apply_ovf(
    image: &RgbImage,
    detections: &[DetectionResult],
    cfg: &OvfConfig,
) -> Result<(RgbImage, CropSpec)> {
    let size = image.dimensions();
    let top = top_detection(detections);
    let score = top.map(|d| d.score);
    let top = match top {
        Some(d) if d.score >= cfg.alpha => d,
        _ => {
            return Ok((
                image.clone(),
                CropSpec {
                    source_box: PixelRect {
                        x1: 0,
                        y1: 0,
                        x2: size.0,
                        y2: size.1,
                    },
                    padded_size: size,
                    used_detection: false,
                    score,
                },
            ))
        }
    };
    let grown = enlarge_box(&top.bbox, cfg.enlarge_factor, size)?;
    let rect = crop_rect(&grown, size)?;
    let cropped = imageops::crop_imm(image, rect.x1, rect.y1, rect.width(), rect.height()).to_image();
    let out = pad_to_aspect(&cropped, cfg.target_aspect, cfg.pad_value);
    let padded_size = out.dimensions();
    Ok((
        out,
        CropSpec {
            source_box: rect,
            padded_size,
            used_detection: true,
            score,
        },
    ))
}
