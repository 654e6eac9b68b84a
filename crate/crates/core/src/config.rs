//! Run configuration: TOML with defaults for every key, plus
//! `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{AugmentationPolicy, SplitMode};
use crate::encoder::EncoderConfig;
use crate::error::{DvfError, Result};
use crate::model::ModelConfig;
use crate::ovf::OvfConfig;
use crate::retrieval::DEFAULT_KS;
use crate::svf::DEFAULT_K;
use crate::training::{LossConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub root: PathBuf,
    pub split_mode: SplitMode,
    /// Train share: of images per class (closed) or of classes (open).
    pub fraction: f64,
    /// Detection prompt.
    pub meta_category: String,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            split_mode: SplitMode::Closed,
            fraction: 0.5,
            meta_category: "object".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Fixture,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OvfSection {
    pub enabled: bool,
    pub alpha: f64,
    pub enlarge_factor: f64,
    pub aspect: [u32; 2],
    pub pad_value: [u8; 3],
    pub provider: ProviderKind,
    /// Sidecar directory for the fixture provider.
    pub fixture_dir: PathBuf,
    pub endpoint: String,
    pub timeout_secs: f64,
    /// Detection cache; empty disables caching.
    pub cache_dir: PathBuf,
}

impl Default for OvfSection {
    fn default() -> Self {
        let ovf = OvfConfig::default();
        Self {
            enabled: false,
            alpha: ovf.alpha,
            enlarge_factor: ovf.enlarge_factor,
            aspect: [ovf.target_aspect.0, ovf.target_aspect.1],
            pad_value: ovf.pad_value,
            provider: ProviderKind::Fixture,
            fixture_dir: PathBuf::from("detections"),
            endpoint: "http://127.0.0.1:8080/detect".into(),
            timeout_secs: 30.0,
            cache_dir: PathBuf::new(),
        }
    }
}

impl OvfSection {
    pub fn ovf_config(&self) -> OvfConfig {
        OvfConfig {
            alpha: self.alpha,
            enlarge_factor: self.enlarge_factor,
            target_aspect: (self.aspect[0], self.aspect[1]),
            pad_value: self.pad_value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub svf_enabled: bool,
    pub k: usize,
    pub importance_generator: bool,
    /// Optional named-tensor file with initial encoder weights.
    pub pretrained: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let enc = EncoderConfig::toy();
        Self {
            image_size: enc.image_size,
            patch_size: enc.patch_size,
            depth: enc.depth,
            dim: enc.dim,
            heads: enc.heads,
            mlp_ratio: enc.mlp_ratio,
            svf_enabled: true,
            k: DEFAULT_K,
            importance_generator: true,
            pretrained: None,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_size: self.image_size,
                patch_size: self.patch_size,
                depth: self.depth,
                dim: self.dim,
                heads: self.heads,
                mlp_ratio: self.mlp_ratio,
            },
            svf_enabled: self.svf_enabled,
            k: self.k,
            importance_generator: self.importance_generator,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub beta: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub proxy_lr_multiplier: f64,
    pub seed: u64,
    pub dmt: bool,
    pub augmentation: AugmentationPolicy,
}

impl Default for TrainSection {
    fn default() -> Self {
        let loss = LossConfig::default();
        Self {
            beta: loss.beta,
            batch_size: loss.batch_size,
            lr: loss.lr,
            epochs: loss.epochs,
            proxy_lr_multiplier: loss.proxy_lr_multiplier,
            seed: 0,
            dmt: true,
            augmentation: AugmentationPolicy::default(),
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: LossConfig {
                beta: self.beta,
                batch_size: self.batch_size,
                lr: self.lr,
                epochs: self.epochs,
                proxy_lr_multiplier: self.proxy_lr_multiplier,
            },
            seed: self.seed,
            augmentation: self.augmentation.clone(),
            dmt: self.dmt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub ovf: OvfSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Reads `path` (if given), applies overrides, and validates.
    /// Relative paths in a file resolve against the file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (text, base) = match path {
            Some(p) => (
                std::fs::read_to_string(p).map_err(|e| {
                    DvfError::Configuration(format!("cannot read config {}: {e}", p.display()))
                })?,
                p.parent().map(Path::to_path_buf),
            ),
            None => (String::new(), None),
        };
        let mut cfg = Self::from_toml(&text, overrides)?;
        if let Some(base) = base.filter(|b| !b.as_os_str().is_empty()) {
            cfg.resolve_paths(&base);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text)
            .map_err(|e| DvfError::Configuration(format!("invalid config TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = value
            .try_into()
            .map_err(|e| DvfError::Configuration(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.dataset.root);
        fix(&mut self.ovf.fixture_dir);
        fix(&mut self.ovf.cache_dir);
        if let Some(p) = self.model.pretrained.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dataset.fraction > 0.0 && self.dataset.fraction < 1.0) {
            return Err(DvfError::Configuration(format!(
                "dataset.fraction {} outside (0, 1)",
                self.dataset.fraction
            )));
        }
        self.ovf.ovf_config().validate()?;
        if !(self.ovf.timeout_secs > 0.0 && self.ovf.timeout_secs.is_finite()) {
            return Err(DvfError::Configuration("ovf.timeout_secs must be positive".into()));
        }
        self.model.model_config().validate()?;
        let t = self.train.train_config();
        t.loss.validate()?;
        t.augmentation.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(DvfError::Configuration("eval.ks must be nonempty positive integers".into()));
        }
        if self.eval.batch_size == 0 {
            return Err(DvfError::Configuration("eval.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Sets `a.b.c=value` in a TOML tree. The value is parsed as TOML and
/// falls back to a bare string.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| DvfError::Configuration(format!("override '{spec}' is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(DvfError::Configuration(format!("bad override key '{key}'")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| DvfError::Configuration(format!("override '{key}' descends into a non-table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| DvfError::Configuration(format!("override '{key}' descends into a non-table")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.lr, 3e-2);
        assert_eq!(cfg.model.k, 12);
        assert_eq!(cfg.eval.ks, vec![1, 2, 4, 8]);
        assert_eq!(cfg.ovf.aspect, [3, 4]);
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_parse_typed_values() {
        let cfg = RunConfig::from_toml(
            "[train]\nepochs = 3\n",
            &[
                "train.lr=0.001".into(),
                "model.svf_enabled=false".into(),
                "dataset.split_mode=open".into(),
                "eval.ks=[1, 5]".into(),
                "train.augmentation.hue=0.0".into(),
                "output_dir=runs/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 0.001);
        assert!(!cfg.model.svf_enabled);
        assert_eq!(cfg.dataset.split_mode, SplitMode::Open);
        assert_eq!(cfg.eval.ks, vec![1, 5]);
        assert_eq!(cfg.train.augmentation.hue, 0.0);
        assert_eq!(cfg.output_dir, PathBuf::from("runs/x"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        for (text, ov) in [
            ("[train]\nepoch = 3\n", vec![]),
            ("", vec!["model.k=0".to_string()]),
            ("", vec!["train.beta=1.5".to_string()]),
            ("", vec!["nokey".to_string()]),
            ("", vec!["model.patch_size=15".to_string()]),
        ] {
            let err = RunConfig::from_toml(text, &ov).unwrap_err();
            assert!(
                matches!(err, DvfError::Configuration(_) | DvfError::Shape(_)),
                "{text:?} {ov:?}: {err}"
            );
        }
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "output_dir = \"out\"\n[dataset]\nroot = \"/abs/data\"\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.output_dir, dir.path().join("out"));
        assert_eq!(cfg.dataset.root, PathBuf::from("/abs/data"));
        assert_eq!(cfg.ovf.cache_dir, PathBuf::new());
    }
}
