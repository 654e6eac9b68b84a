//! Encoder plus token filter, bundled with checkpoint I/O.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::NamedTensors;
use crate::dataset::{resize_crop_to, resize_for_crop};
use crate::encoder::{images_to_tensor, EncoderConfig, Encoding, VisionTransformer};
use crate::error::{DvfError, Result};
use crate::svf::{ImportanceGenerator, SvfHook, DEFAULT_K};

pub const CHECKPOINT_FORMAT: &str = "dvf-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub svf_enabled: bool,
    pub k: usize,
    /// Rank tokens by `A * (1 + Z)` rather than by attention alone.
    pub importance_generator: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            svf_enabled: true,
            k: DEFAULT_K,
            importance_generator: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.svf_enabled && self.k == 0 {
            return Err(DvfError::Configuration("svf k must be at least 1".into()));
        }
        Ok(())
    }

    /// `k` after clamping to the patch count.
    pub fn effective_k(&self) -> usize {
        self.k.min(self.encoder.num_patches())
    }
}

#[derive(Debug)]
pub struct DvfModel {
    cfg: ModelConfig,
    pub encoder: VisionTransformer,
    pub importance: ImportanceGenerator,
}

impl DvfModel {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let encoder = VisionTransformer::new(cfg.encoder.clone(), seed, dtype, device)?;
        let importance = ImportanceGenerator::zeros(cfg.encoder.dim, dtype, device)?;
        Ok(Self {
            cfg,
            encoder,
            importance,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.encoder.dtype()
    }

    pub fn device(&self) -> &Device {
        self.encoder.device()
    }

    /// The hook implied by the configuration, if filtering is on.
    pub fn hook(&self) -> Option<SvfHook<'_>> {
        self.cfg.svf_enabled.then(|| {
            SvfHook::new(
                self.cfg.effective_k(),
                self.cfg.importance_generator.then_some(&self.importance),
            )
        })
    }

    pub fn encode(&self, images: &Tensor) -> Result<Encoding> {
        self.encoder.encode(images, self.hook().as_ref())
    }

    pub fn named_vars(&self) -> Vec<(String, &Var)> {
        let mut out: Vec<(String, &Var)> = self
            .encoder
            .named_vars()
            .into_iter()
            .map(|(n, v)| (format!("encoder.{n}"), v))
            .collect();
        out.extend(self.importance.named_vars());
        out
    }

    /// Trainable parameters. The importance generator only receives a
    /// gradient when it takes part in ranking.
    pub fn vars(&self) -> Vec<Var> {
        let mut vars = self.encoder.vars();
        if self.cfg.svf_enabled && self.cfg.importance_generator {
            vars.extend(self.importance.vars());
        }
        vars
    }

    pub fn to_tensors(&self) -> Result<NamedTensors> {
        let mut t = NamedTensors::new();
        t.insert_vars(self.named_vars())?;
        t.metadata.insert("format".into(), CHECKPOINT_FORMAT.into());
        t.metadata.insert(
            "model_config".into(),
            serde_json::to_string(&self.cfg)
                .map_err(|e| DvfError::Internal(format!("model config: {e}")))?,
        );
        Ok(t)
    }

    pub fn from_tensors(tensors: &NamedTensors, dtype: DType, device: &Device) -> Result<Self> {
        let cfg_json = tensors
            .metadata
            .get("model_config")
            .ok_or_else(|| DvfError::Configuration("checkpoint lacks model_config metadata".into()))?;
        let cfg: ModelConfig = serde_json::from_str(cfg_json)
            .map_err(|e| DvfError::Configuration(format!("bad model_config in checkpoint: {e}")))?;
        let model = Self::new(cfg, 0, dtype, device)?;
        model.encoder.load_tensors(tensors, "encoder.")?;
        for (name, var) in model.importance.named_vars() {
            var.set(&tensors.tensor(&name, var.dims(), dtype, device)?)?;
        }
        Ok(model)
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        Self::from_tensors(&NamedTensors::load(path)?, dtype, device)
    }

    /// Center-cropped input at the encoder's resolution.
    pub fn eval_view(&self, image: &RgbImage) -> RgbImage {
        let crop = self.cfg.encoder.image_size as u32;
        // Center crop draws nothing from the generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        resize_crop_to(image, resize_for_crop(crop), crop, false, &mut rng)
    }

    /// Embeds already-preprocessed views in batches, returning one
    /// normalized row per image.
    pub fn embed_views(&self, views: &[RgbImage], batch_size: usize) -> Result<Vec<Vec<f32>>> {
        let mut rows = Vec::with_capacity(views.len());
        for chunk in views.chunks(batch_size.max(1)) {
            let x = images_to_tensor(chunk, self.dtype(), self.device())?;
            let enc = self.encode(&x)?;
            let e = enc.embeddings.to_dtype(DType::F32)?.to_vec2::<f32>()?;
            rows.extend(e);
        }
        Ok(rows)
    }
}
