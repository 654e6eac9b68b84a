//! Synthetic shape/texture corpus with known object boxes, for exercising
//! the pipeline without external datasets.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::DetectionPayload;
use crate::error::{DvfError, Result};
use crate::io::write_json;

const SHAPES: [Shape; 8] = [
    Shape::Circle,
    Shape::Square,
    Shape::Triangle,
    Shape::Diamond,
    Shape::Cross,
    Shape::Ring,
    Shape::Star,
    Shape::Crescent,
];

const TEXTURES: [Texture; 4] = [Texture::Solid, Texture::Stripes, Texture::Checker, Texture::Dots];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
    Star,
    Crescent,
}

impl Shape {
    /// Membership test in object-local coordinates `[-1, 1]^2`.
    fn contains(self, u: f64, v: f64) -> bool {
        let r = (u * u + v * v).sqrt();
        match self {
            Shape::Circle => r <= 1.0,
            Shape::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
            Shape::Triangle => (-1.0..=0.9).contains(&v) && u.abs() <= (v + 1.0) / 1.9,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Shape::Ring => (0.55..=1.0).contains(&r),
            Shape::Star => {
                let theta = v.atan2(u);
                r <= 0.55 + 0.45 * (5.0 * theta).cos().max(0.0).powf(0.6)
            }
            Shape::Crescent => r <= 1.0 && ((u - 0.45).powi(2) + v * v).sqrt() > 0.75,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
            Shape::Star => "star",
            Shape::Crescent => "crescent",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Solid,
    Stripes,
    Checker,
    Dots,
}

impl Texture {
    /// True where the secondary color shows.
    fn secondary(self, u: f64, v: f64) -> bool {
        let cell = |x: f64| ((x + 1.0) * 3.0).floor() as i64;
        match self {
            Texture::Solid => false,
            Texture::Stripes => cell(u + v) % 2 == 0,
            Texture::Checker => (cell(u) + cell(v)) % 2 == 0,
            Texture::Dots => {
                let fu = ((u + 1.0) * 3.0).fract() - 0.5;
                let fv = ((v + 1.0) * 3.0).fract() - 0.5;
                fu * fu + fv * fv < 0.09
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::Stripes => "stripes",
            Texture::Checker => "checker",
            Texture::Dots => "dots",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub shape: Shape,
    pub texture: Texture,
    /// Hue in degrees.
    pub hue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: u32,
    /// Range of object bounding-box area as a fraction of the frame.
    pub object_scale: (f64, f64),
    /// Number of background distractor blobs per image.
    pub clutter: usize,
    pub seed: u64,
    /// Pixel jitter applied to the fixture box edges.
    pub box_noise: f64,
    pub write_detections: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class: 40,
            image_size: 256,
            object_scale: (0.2, 0.4),
            clutter: 12,
            seed: 0,
            box_noise: 3.0,
            write_detections: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.object_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 0.9) {
            return Err(DvfError::Configuration(format!(
                "object scale ({lo}, {hi}) must satisfy 0 < min <= max <= 0.9"
            )));
        }
        if self.classes == 0 || self.per_class == 0 {
            return Err(DvfError::Configuration("synthetic corpus needs classes and images".into()));
        }
        if self.image_size < 64 {
            return Err(DvfError::Configuration("synthetic images must be at least 64 px".into()));
        }
        Ok(())
    }
}

/// Class `i`: shapes cycle fastest, then textures, with hues spread
/// around the color wheel.
pub fn class_specs(n: usize) -> Vec<ClassSpec> {
    (0..n)
        .map(|i| {
            let shape = SHAPES[i % SHAPES.len()];
            let texture = TEXTURES[(i / SHAPES.len()) % TEXTURES.len()];
            let hue = (i as f64 * 360.0 / n as f64 + 17.0 * (i / SHAPES.len()) as f64) % 360.0;
            ClassSpec {
                name: format!("{i:02}_{}_{}", shape.name(), texture.name()),
                shape,
                texture,
                hue,
            }
        })
        .collect()
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|ch| ((ch + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectPlacement {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Draws one image of `class`, returning it with the object's box.
pub fn render(class: &ClassSpec, cfg: &SynthConfig, rng: &mut impl Rng) -> (RgbImage, ObjectPlacement) {
    let s = cfg.image_size;
    let sf = s as f64;
    let bg_hue: f64 = rng.random_range(0.0..360.0);
    let bg = hsv(bg_hue, rng.random_range(0.05..0.25), rng.random_range(0.35..0.65));
    let mut img = RgbImage::from_fn(s, s, |_, _| Rgb(bg));
    for p in img.pixels_mut() {
        let n: i16 = rng.random_range(-12..=12);
        *p = Rgb(p.0.map(|c| (c as i16 + n).clamp(0, 255) as u8));
    }
    for _ in 0..cfg.clutter {
        let r = rng.random_range(0.02..0.06) * sf;
        let cx = rng.random_range(0.0..sf);
        let cy = rng.random_range(0.0..sf);
        let color = hsv(rng.random_range(0.0..360.0), rng.random_range(0.0..0.4), rng.random_range(0.2..0.8));
        let square = rng.random_bool(0.5);
        fill(&mut img, cx - r, cy - r, cx + r, cy + r, |u, v| {
            if square {
                true
            } else {
                u * u + v * v <= 1.0
            }
        }, |_, _| color);
    }

    let area = rng.random_range(cfg.object_scale.0..=cfg.object_scale.1) * sf * sf;
    let aspect: f64 = rng.random_range(0.8..1.25);
    let w = (area * aspect).sqrt().min(sf - 2.0);
    let h = (area / aspect).sqrt().min(sf - 2.0);
    let x1 = rng.random_range(0.0..=(sf - w));
    let y1 = rng.random_range(0.0..=(sf - h));
    let angle: f64 = rng.random_range(-0.5..0.5);
    let hue = class.hue + rng.random_range(-8.0..8.0);
    let primary = hsv(hue, rng.random_range(0.75..0.95), rng.random_range(0.8..0.95));
    let secondary = hsv(hue + 180.0, 0.3, rng.random_range(0.15..0.3));
    let (sin, cos) = angle.sin_cos();
    let shape = class.shape;
    let texture = class.texture;
    fill(
        &mut img,
        x1,
        y1,
        x1 + w,
        y1 + h,
        |u, v| {
            let (ru, rv) = (cos * u + sin * v, -sin * u + cos * v);
            shape.contains(ru, rv)
        },
        |u, v| {
            let (ru, rv) = (cos * u + sin * v, -sin * u + cos * v);
            if texture.secondary(ru, rv) {
                secondary
            } else {
                primary
            }
        },
    );
    (
        img,
        ObjectPlacement {
            x1,
            y1,
            x2: x1 + w,
            y2: y1 + h,
        },
    )
}

/// Paints pixels whose centers fall inside the box and satisfy `inside`,
/// with local coordinates mapped to `[-1, 1]^2`.
fn fill(
    img: &mut RgbImage,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    inside: impl Fn(f64, f64) -> bool,
    color: impl Fn(f64, f64) -> [u8; 3],
) {
    let (w, h) = img.dimensions();
    let px1 = x1.floor().max(0.0) as u32;
    let py1 = y1.floor().max(0.0) as u32;
    let px2 = (x2.ceil().max(0.0) as u32).min(w);
    let py2 = (y2.ceil().max(0.0) as u32).min(h);
    let (cx, cy) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
    let (hw, hh) = ((x2 - x1) / 2.0, (y2 - y1) / 2.0);
    for y in py1..py2 {
        for x in px1..px2 {
            let u = (x as f64 + 0.5 - cx) / hw;
            let v = (y as f64 + 0.5 - cy) / hh;
            if inside(u, v) {
                img.put_pixel(x, y, Rgb(color(u, v)));
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSummary {
    pub images_dir: PathBuf,
    pub detections_dir: Option<PathBuf>,
    pub classes: Vec<ClassSpec>,
    pub images: usize,
}

/// Writes `<out>/images/<class>/<nnn>.png` and, optionally, fixture
/// sidecars `<out>/detections/<class>/<nnn>.json` holding the true box
/// plus a low-confidence distractor.
pub fn generate(cfg: &SynthConfig, out: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let classes = class_specs(cfg.classes);
    let images_dir = out.join("images");
    let det_dir = out.join("detections");
    let sf = cfg.image_size as f64;
    for (ci, class) in classes.iter().enumerate() {
        let class_dir = images_dir.join(&class.name);
        std::fs::create_dir_all(&class_dir).map_err(|e| DvfError::io(&class_dir, e))?;
        for i in 0..cfg.per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add((ci as u64) << 20)
                    .wrapping_add(i as u64),
            );
            let (img, placement) = render(class, cfg, &mut rng);
            let stem = format!("{i:03}");
            let path = class_dir.join(format!("{stem}.png"));
            img.save(&path)
                .map_err(|e| DvfError::Data(format!("cannot write {}: {e}", path.display())))?;
            if cfg.write_detections {
                let mut jitter = || rng.random_range(-cfg.box_noise..=cfg.box_noise);
                let b = [
                    (placement.x1 + jitter()).clamp(0.0, sf - 1.0),
                    (placement.y1 + jitter()).clamp(0.0, sf - 1.0),
                    (placement.x2 + jitter()).clamp(1.0, sf),
                    (placement.y2 + jitter()).clamp(1.0, sf),
                ];
                let dx = rng.random_range(0.0..sf * 0.7);
                let dy = rng.random_range(0.0..sf * 0.7);
                let decoy = [dx, dy, dx + sf * 0.25, dy + sf * 0.25];
                let payload = DetectionPayload {
                    boxes: vec![b, decoy],
                    scores: vec![rng.random_range(0.7..0.99), rng.random_range(0.05..0.4)],
                };
                write_json(&det_dir.join(&class.name).join(format!("{stem}.json")), &payload)?;
            }
        }
    }
    Ok(SynthSummary {
        images_dir,
        detections_dir: cfg.write_detections.then_some(det_dir),
        classes,
        images: cfg.classes * cfg.per_class,
    })
}
