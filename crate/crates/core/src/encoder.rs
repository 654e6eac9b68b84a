//! Plain ViT image encoder.
//!
//! Patch projection, class token and learned position embedding, then `L`
//! pre-norm transformer layers. Every layer records the post-softmax
//! attention from the class-token query to the patch keys so the token
//! filter can consume the penultimate layer's map before the last layer.

use candle_core::{DType, Device, Tensor, Var, D};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::NamedTensors;
use crate::error::{DvfError, Result};
use crate::svf::{self, SvfHook, SvfSelection};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;
const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl Default for EncoderConfig {
    /// ViT-B/16.
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            depth: 12,
            dim: 768,
            heads: 12,
            mlp_ratio: 4.0,
        }
    }
}

impl EncoderConfig {
    /// Small from-scratch configuration used for desk-scale runs.
    pub fn toy() -> Self {
        Self {
            depth: 4,
            dim: 64,
            heads: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(DvfError::Shape(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(DvfError::Shape(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.depth < 2 {
            return Err(DvfError::Configuration(format!(
                "depth {} leaves no penultimate layer",
                self.depth
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(DvfError::Configuration("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn hidden_dim(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    fn patch_len(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Token sequence between layers. `tokens` is `(B, T, D)` with the class
/// token at index 0; `class_attention` is `(B, M, T - 1)`, the class
/// query's post-softmax weights over the patch keys of the layer that
/// produced `tokens` (absent straight after patchify).
#[derive(Debug, Clone)]
pub struct TokenState {
    pub tokens: Tensor,
    pub layer_index: usize,
    pub class_attention: Option<Tensor>,
}

impl TokenState {
    pub fn seq_len(&self) -> Result<usize> {
        Ok(self.tokens.dim(1)?)
    }
}

#[derive(Debug)]
pub struct Encoding {
    /// `(B, D)`, rows L2-normalized.
    pub embeddings: Tensor,
    /// One entry per image when token filtering ran.
    pub selections: Vec<SvfSelection>,
}

#[derive(Debug)]
struct Block {
    norm1_w: Var,
    norm1_b: Var,
    qkv_w: Var,
    qkv_b: Var,
    proj_w: Var,
    proj_b: Var,
    norm2_w: Var,
    norm2_b: Var,
    fc1_w: Var,
    fc1_b: Var,
    fc2_w: Var,
    fc2_b: Var,
}

impl Block {
    fn named(&self, i: usize) -> Vec<(String, &Var)> {
        let p = |n: &str| format!("blocks.{i}.{n}");
        vec![
            (p("norm1.weight"), &self.norm1_w),
            (p("norm1.bias"), &self.norm1_b),
            (p("attn.qkv.weight"), &self.qkv_w),
            (p("attn.qkv.bias"), &self.qkv_b),
            (p("attn.proj.weight"), &self.proj_w),
            (p("attn.proj.bias"), &self.proj_b),
            (p("norm2.weight"), &self.norm2_w),
            (p("norm2.bias"), &self.norm2_b),
            (p("mlp.fc1.weight"), &self.fc1_w),
            (p("mlp.fc1.bias"), &self.fc1_b),
            (p("mlp.fc2.weight"), &self.fc2_w),
            (p("mlp.fc2.bias"), &self.fc2_b),
        ]
    }
}

#[derive(Debug)]
pub struct VisionTransformer {
    cfg: EncoderConfig,
    dtype: DType,
    device: Device,
    patch_w: Var,
    patch_b: Var,
    class_token: Var,
    pos_embed: Var,
    blocks: Vec<Block>,
}

struct Init {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl Init {
    fn trunc_normal(&mut self, shape: &[usize]) -> Result<Var> {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(&mut self.rng);
                if v.abs() <= 2.0 * INIT_STD {
                    break v;
                }
            })
            .collect();
        self.var(data, shape)
    }

    fn fill(&mut self, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.var(vec![value; n], shape)
    }

    fn var(&self, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }
}

fn linear(x: &Tensor, w: &Var, b: &Var) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let din = *dims.last().expect("rank >= 1");
    let rows = x.elem_count() / din;
    let y = x.reshape((rows, din))?.matmul(w.as_tensor())?.broadcast_add(b.as_tensor())?;
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = w.dim(1)?;
    Ok(y.reshape(out_dims)?)
}

fn layer_norm(x: &Tensor, w: &Var, b: &Var) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    Ok(normed.broadcast_mul(w.as_tensor())?.broadcast_add(b.as_tensor())?)
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Row-wise L2 normalization of a `(B, D)` tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(DvfError::Numerics(format!("non-finite activations in {what}")))
    }
}

/// Converts equally sized RGB images into a normalized `(B, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[RgbImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let (w, h) = images
        .first()
        .map(|i| i.dimensions())
        .ok_or_else(|| DvfError::Shape("empty image batch".into()))?;
    let plane = (w * h) as usize;
    let mut data = vec![0f32; images.len() * 3 * plane];
    for (b, img) in images.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(DvfError::Shape(format!(
                "batch mixes {}x{} and {w}x{h} images",
                img.width(),
                img.height()
            )));
        }
        let base = b * 3 * plane;
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                data[base + c * plane + i] = (p[c] as f32 / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c];
            }
        }
    }
    let t = Tensor::from_vec(data, (images.len(), 3, h as usize, w as usize), device)?;
    Ok(t.to_dtype(dtype)?)
}

impl VisionTransformer {
    pub fn new(cfg: EncoderConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
        };
        let d = cfg.dim;
        let hidden = cfg.hidden_dim();
        let patch_w = init.trunc_normal(&[cfg.patch_len(), d])?;
        let patch_b = init.fill(&[d], 0.0)?;
        let class_token = init.trunc_normal(&[1, 1, d])?;
        let pos_embed = init.trunc_normal(&[1, cfg.num_patches() + 1, d])?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            blocks.push(Block {
                norm1_w: init.fill(&[d], 1.0)?,
                norm1_b: init.fill(&[d], 0.0)?,
                qkv_w: init.trunc_normal(&[d, 3 * d])?,
                qkv_b: init.fill(&[3 * d], 0.0)?,
                proj_w: init.trunc_normal(&[d, d])?,
                proj_b: init.fill(&[d], 0.0)?,
                norm2_w: init.fill(&[d], 1.0)?,
                norm2_b: init.fill(&[d], 0.0)?,
                fc1_w: init.trunc_normal(&[d, hidden])?,
                fc1_b: init.fill(&[hidden], 0.0)?,
                fc2_w: init.trunc_normal(&[hidden, d])?,
                fc2_b: init.fill(&[d], 0.0)?,
            });
        }
        Ok(Self {
            cfg,
            dtype,
            device: device.clone(),
            patch_w,
            patch_b,
            class_token,
            pos_embed,
            blocks,
        })
    }

    /// Builds an encoder whose parameters are read from `tensors` under
    /// `prefix` (e.g. `"encoder."`).
    pub fn from_tensors(
        cfg: EncoderConfig,
        tensors: &NamedTensors,
        prefix: &str,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let model = Self::new(cfg, 0, dtype, device)?;
        model.load_tensors(tensors, prefix)?;
        Ok(model)
    }

    pub fn load_tensors(&self, tensors: &NamedTensors, prefix: &str) -> Result<()> {
        for (name, var) in self.named_vars() {
            let t = tensors.tensor(&format!("{prefix}{name}"), var.dims(), self.dtype, &self.device)?;
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Parameters in a fixed order with checkpoint names.
    pub fn named_vars(&self) -> Vec<(String, &Var)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &self.patch_w),
            ("patch_embed.bias".to_string(), &self.patch_b),
            ("cls_token".to_string(), &self.class_token),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(i));
        }
        out
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v.clone()).collect()
    }

    /// Zeroes the attention and MLP output projections of every layer,
    /// making each layer a residual identity.
    pub fn zero_residual_branches(&self) -> Result<()> {
        for b in &self.blocks {
            for v in [&b.proj_w, &b.proj_b, &b.fc2_w, &b.fc2_b] {
                v.set(&v.zeros_like()?)?;
            }
        }
        Ok(())
    }

    /// `(B, 3, H, W)` images to the initial `(B, N + 1, D)` sequence.
    pub fn patchify(&self, images: &Tensor) -> Result<TokenState> {
        let (b, c, h, w) = images.dims4().map_err(|e| DvfError::Shape(e.to_string()))?;
        let s = self.cfg.image_size;
        if c != 3 || h != s || w != s {
            return Err(DvfError::Shape(format!(
                "expected (B, 3, {s}, {s}) images, got ({b}, {c}, {h}, {w})"
            )));
        }
        let p = self.cfg.patch_size;
        let g = self.cfg.grid();
        let n = self.cfg.num_patches();
        let patches = images
            .reshape((b, 3, g, p, g, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, n, self.cfg.patch_len()))?;
        let embedded = linear(&patches, &self.patch_w, &self.patch_b)?;
        let cls = self.class_token.as_tensor().broadcast_as((b, 1, self.cfg.dim))?;
        let tokens = Tensor::cat(&[&cls, &embedded], 1)?.broadcast_add(self.pos_embed.as_tensor())?;
        Ok(TokenState {
            tokens,
            layer_index: 0,
            class_attention: None,
        })
    }

    /// One pre-norm transformer layer: attention then MLP, both residual.
    pub fn forward_layer(&self, state: &TokenState) -> Result<TokenState> {
        let block = self.blocks.get(state.layer_index).ok_or_else(|| {
            DvfError::Internal(format!(
                "layer index {} beyond depth {}",
                state.layer_index, self.cfg.depth
            ))
        })?;
        let x = &state.tokens;
        let (b, t, d) = x.dims3()?;
        let m = self.cfg.heads;
        let dh = d / m;

        let qkv = linear(&layer_norm(x, &block.norm1_w, &block.norm1_b)?, &block.qkv_w, &block.qkv_b)?
            .reshape((b, t, 3, m, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * (1.0 / (dh as f64).sqrt()))?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let attn = softmax_last(&q.matmul(&k.t()?.contiguous()?)?)?;
        let mixed = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, d))?;
        let x = (x + linear(&mixed, &block.proj_w, &block.proj_b)?)?;

        let hidden = linear(&layer_norm(&x, &block.norm2_w, &block.norm2_b)?, &block.fc1_w, &block.fc1_b)?
            .gelu_erf()?;
        let x = (&x + linear(&hidden, &block.fc2_w, &block.fc2_b)?)?;
        ensure_finite(&x, &format!("layer {}", state.layer_index + 1))?;

        let class_attention = attn.narrow(2, 0, 1)?.squeeze(2)?.narrow(2, 1, t - 1)?;
        Ok(TokenState {
            tokens: x,
            layer_index: state.layer_index + 1,
            class_attention: Some(class_attention),
        })
    }

    /// Runs the full encoder. With a hook, the last layer sees only the
    /// class token plus the tokens the filter selects.
    pub fn encode(&self, images: &Tensor, svf: Option<&SvfHook>) -> Result<Encoding> {
        let mut state = self.patchify(images)?;
        for _ in 0..self.cfg.depth - 1 {
            state = self.forward_layer(&state)?;
        }
        let mut selections = Vec::new();
        if let Some(hook) = svf {
            let (filtered, sel) = svf::filter(hook, &state)?;
            state = filtered;
            selections = sel;
        }
        let state = self.forward_layer(&state)?;
        let cls = state.tokens.narrow(1, 0, 1)?.squeeze(1)?;
        Ok(Encoding {
            embeddings: l2_normalize(&cls)?,
            selections,
        })
    }

    /// Runs layers `1..L-1` and returns the penultimate state.
    pub fn forward_to_penultimate(&self, images: &Tensor) -> Result<TokenState> {
        let mut state = self.patchify(images)?;
        for _ in 0..self.cfg.depth - 1 {
            state = self.forward_layer(&state)?;
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            image_size: 64,
            patch_size: 16,
            depth: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
        }
    }

    fn random_images(b: usize, size: usize, seed: u64, dtype: DType) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let data: Vec<f64> = (0..b * 3 * size * size).map(|_| normal.sample(&mut rng)).collect();
        Tensor::from_vec(data, (b, 3, size, size), &Device::Cpu)
            .unwrap()
            .to_dtype(dtype)
            .unwrap()
    }

    #[test]
    fn sequence_length_follows_patch_grid() {
        let dev = Device::Cpu;
        let vit = VisionTransformer::new(EncoderConfig { depth: 2, dim: 16, heads: 2, ..EncoderConfig::default() }, 0, DType::F32, &dev).unwrap();
        let state = vit.patchify(&random_images(1, 224, 0, DType::F32)).unwrap();
        assert_eq!(state.tokens.dims(), &[1, 197, 16]);

        let vit = VisionTransformer::new(tiny(), 0, DType::F32, &dev).unwrap();
        let state = vit.patchify(&random_images(2, 64, 0, DType::F32)).unwrap();
        assert_eq!(state.tokens.dims(), &[2, 17, 8]);
    }

    #[test]
    fn indivisible_patch_size_is_shape_error() {
        let cfg = EncoderConfig { patch_size: 15, ..EncoderConfig::default() };
        assert!(matches!(cfg.validate(), Err(DvfError::Shape(_))));
        let cfg = EncoderConfig { dim: 10, heads: 3, ..tiny() };
        assert!(matches!(cfg.validate(), Err(DvfError::Shape(_))));
        let cfg = EncoderConfig { depth: 1, ..tiny() };
        assert!(matches!(cfg.validate(), Err(DvfError::Configuration(_))));
    }

    #[test]
    fn wrong_image_size_is_shape_error() {
        let vit = VisionTransformer::new(tiny(), 0, DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(vit.patchify(&random_images(1, 32, 0, DType::F32)), Err(DvfError::Shape(_))));
    }

    #[test]
    fn zeroed_output_projections_make_layers_identities() {
        let vit = VisionTransformer::new(tiny(), 3, DType::F64, &Device::Cpu).unwrap();
        vit.zero_residual_branches().unwrap();
        let state = vit.patchify(&random_images(2, 64, 1, DType::F64)).unwrap();
        let next = vit.forward_layer(&state).unwrap();
        let diff = (next.tokens - &state.tokens).unwrap().abs().unwrap().max_keepdim(2).unwrap();
        assert_eq!(diff.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().cloned().fold(0.0, f64::max), 0.0);
    }

    #[test]
    fn class_only_sequence_attends_to_itself() {
        let vit = VisionTransformer::new(tiny(), 3, DType::F64, &Device::Cpu).unwrap();
        let state = vit.patchify(&random_images(1, 64, 1, DType::F64)).unwrap();
        let cls_only = TokenState {
            tokens: state.tokens.narrow(1, 0, 1).unwrap(),
            layer_index: 1,
            class_attention: None,
        };
        let out = vit.forward_layer(&cls_only).unwrap();
        assert_eq!(out.tokens.dims(), &[1, 1, 8]);
        assert_eq!(out.class_attention.unwrap().dims(), &[1, 2, 0]);
    }

    #[test]
    fn class_attention_is_a_distribution_slice() {
        let vit = VisionTransformer::new(tiny(), 5, DType::F64, &Device::Cpu).unwrap();
        let state = vit.patchify(&random_images(3, 64, 2, DType::F64)).unwrap();
        let out = vit.forward_layer(&state).unwrap();
        let a = out.class_attention.unwrap().to_vec3::<f64>().unwrap();
        for per_image in a {
            for head in per_image {
                assert_eq!(head.len(), 16);
                let s: f64 = head.iter().sum();
                assert!(s > 0.0 && s < 1.0);
                assert!(head.iter().all(|&w| w > 0.0));
            }
        }
    }

    #[test]
    fn embeddings_have_unit_norm() {
        let vit = VisionTransformer::new(tiny(), 9, DType::F32, &Device::Cpu).unwrap();
        let enc = vit.encode(&random_images(4, 64, 3, DType::F32), None).unwrap();
        for row in enc.embeddings.to_vec2::<f32>().unwrap() {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "{n}");
        }
        assert!(enc.selections.is_empty());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = VisionTransformer::new(tiny(), 11, DType::F32, &Device::Cpu).unwrap();
        let b = VisionTransformer::new(tiny(), 11, DType::F32, &Device::Cpu).unwrap();
        let mut ta = NamedTensors::new();
        ta.insert_vars(a.named_vars()).unwrap();
        let mut tb = NamedTensors::new();
        tb.insert_vars(b.named_vars()).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(ta.len(), 4 + 12 * 2);
    }

    #[test]
    fn parameters_reload_from_tensors() {
        let a = VisionTransformer::new(tiny(), 1, DType::F32, &Device::Cpu).unwrap();
        let mut t = NamedTensors::new();
        t.insert_vars(a.named_vars().into_iter().map(|(n, v)| (format!("encoder.{n}"), v))).unwrap();
        let b = VisionTransformer::from_tensors(tiny(), &t, "encoder.", DType::F32, &Device::Cpu).unwrap();
        let x = random_images(2, 64, 4, DType::F32);
        let ea = a.encode(&x, None).unwrap().embeddings.to_vec2::<f32>().unwrap();
        let eb = b.encode(&x, None).unwrap().embeddings.to_vec2::<f32>().unwrap();
        assert_eq!(ea, eb);
    }
}
