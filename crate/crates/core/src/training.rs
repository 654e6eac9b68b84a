//! Discriminative training: ProxyNCA plus a margin contrastive term,
//! optimized with Adam under cosine annealing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::NamedTensors;
use crate::dataset::{self, augment, hflip, resize_crop_to, resize_for_crop, AugmentationPolicy, DatasetManifest, Split};
use crate::encoder::{images_to_tensor, l2_normalize};
use crate::error::{DvfError, Result};
use crate::model::DvfModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Margin below which cross-class similarity is not penalized.
    pub beta: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Proxy learning rate as a multiple of `lr`.
    pub proxy_lr_multiplier: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            batch_size: 32,
            lr: 3e-2,
            epochs: 10,
            proxy_lr_multiplier: 10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(DvfError::Configuration(format!("beta {} outside [0, 1)", self.beta)));
        }
        if self.batch_size < 2 {
            return Err(DvfError::Configuration("batch size must be at least 2".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(DvfError::Configuration(format!("invalid learning rate {}", self.lr)));
        }
        if !(self.proxy_lr_multiplier >= 0.0) {
            return Err(DvfError::Configuration("proxy lr multiplier must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub seed: u64,
    pub augmentation: AugmentationPolicy,
    /// Color augmentation plus the contrastive term. Off trains with
    /// ProxyNCA only.
    pub dmt: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            seed: 0,
            augmentation: AugmentationPolicy::default(),
            dmt: true,
        }
    }
}

/// One learnable proxy per training label.
#[derive(Debug)]
pub struct ProxyBank {
    proxies: Var,
    labels: Vec<usize>,
    rows: BTreeMap<usize, usize>,
}

impl ProxyBank {
    /// Random unit vectors, one row per label (labels sorted).
    pub fn random(labels: &[usize], dim: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut labels = labels.to_vec();
        labels.sort_unstable();
        labels.dedup();
        if labels.is_empty() {
            return Err(DvfError::Configuration("proxy bank needs at least one label".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut data = Vec::with_capacity(labels.len() * dim);
        for _ in &labels {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            data.extend(row.into_iter().map(|v| v / norm));
        }
        let t = Tensor::from_vec(data, (labels.len(), dim), device)?.to_dtype(dtype)?;
        Self::from_tensor(labels, t)
    }

    pub fn from_tensor(labels: Vec<usize>, proxies: Tensor) -> Result<Self> {
        if proxies.rank() != 2 || proxies.dim(0)? != labels.len() {
            return Err(DvfError::Shape(format!(
                "proxy matrix {:?} does not match {} labels",
                proxies.dims(),
                labels.len()
            )));
        }
        let rows = labels.iter().enumerate().map(|(r, &l)| (l, r)).collect();
        Ok(Self {
            proxies: Var::from_tensor(&proxies)?,
            labels,
            rows,
        })
    }

    pub fn row(&self, label: usize) -> Result<usize> {
        self.rows.get(&label).copied().ok_or(DvfError::Label(label))
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn var(&self) -> &Var {
        &self.proxies
    }

    pub fn write_into(&self, t: &mut NamedTensors) -> Result<()> {
        t.insert_tensor("proxies", self.proxies.as_tensor())?;
        t.metadata.insert(
            "proxy_labels".into(),
            serde_json::to_string(&self.labels).expect("labels serialize"),
        );
        Ok(())
    }

    pub fn read_from(t: &NamedTensors, dtype: DType, device: &Device) -> Result<Self> {
        let labels: Vec<usize> = t
            .metadata
            .get("proxy_labels")
            .and_then(|s| serde_json::from_str(s).ok())
            .ok_or_else(|| DvfError::Configuration("checkpoint lacks proxy_labels".into()))?;
        let (shape, _) = t
            .get("proxies")
            .ok_or_else(|| DvfError::Configuration("checkpoint lacks proxies".into()))?;
        let proxies = t.tensor("proxies", shape, dtype, device)?;
        Self::from_tensor(labels, proxies)
    }
}

fn one_hot(rows: &[usize], width: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f64; rows.len() * width];
    for (i, &r) in rows.iter().enumerate() {
        data[i * width + r] = 1.0;
    }
    Ok(Tensor::from_vec(data, (rows.len(), width), device)?.to_dtype(dtype)?)
}

/// Per-sample ProxyNCA: `d(e, c_y) + log sum_c exp(-d(e, c))` with `d` the
/// squared Euclidean distance between L2-normalized vectors. Returns `(B,)`.
pub fn proxynca_per_sample(embeddings: &Tensor, labels: &[usize], bank: &ProxyBank) -> Result<Tensor> {
    let rows = labels.iter().map(|&l| bank.row(l)).collect::<Result<Vec<_>>>()?;
    let e = l2_normalize(embeddings)?;
    let p = l2_normalize(bank.proxies.as_tensor())?;
    let (b, d) = e.dims2()?;
    let c = p.dim(0)?;
    let diff = e.reshape((b, 1, d))?.broadcast_sub(&p.reshape((1, c, d))?)?;
    let dist = diff.sqr()?.sum(D::Minus1)?;
    let mask = one_hot(&rows, c, e.dtype(), e.device())?;
    let d_true = (&dist * &mask)?.sum(D::Minus1)?;
    let neg = dist.neg()?;
    let m = neg.max_keepdim(D::Minus1)?.detach();
    let lse = (neg.broadcast_sub(&m)?.exp()?.sum_keepdim(D::Minus1)?.log()? + m)?.squeeze(1)?;
    Ok((d_true + lse)?)
}

/// Batch mean of [`proxynca_per_sample`].
pub fn proxynca_loss(embeddings: &Tensor, labels: &[usize], bank: &ProxyBank) -> Result<Tensor> {
    Ok(proxynca_per_sample(embeddings, labels, bank)?.mean_all()?)
}

/// `(1/B^2) sum_i [ sum_{y_j = y_i} (1 - s_ij) + sum_{y_j != y_i} max(s_ij - beta, 0) ]`
/// over dot products of L2-normalized embeddings, self-pairs included.
pub fn contrastive_loss(embeddings: &Tensor, labels: &[usize], beta: f64) -> Result<Tensor> {
    let e = l2_normalize(embeddings)?;
    let b = e.dim(0)?;
    if labels.len() != b {
        return Err(DvfError::Shape(format!("{} labels for {b} embeddings", labels.len())));
    }
    let sim = e.matmul(&e.t()?)?;
    let mut same = vec![0f64; b * b];
    for i in 0..b {
        for j in 0..b {
            if labels[i] == labels[j] {
                same[i * b + j] = 1.0;
            }
        }
    }
    let same = Tensor::from_vec(same, (b, b), e.device())?.to_dtype(e.dtype())?;
    let diff = (1.0 - &same)?;
    let pos = (&same * (1.0 - &sim)?)?.sum_all()?;
    let neg = (&diff * (sim - beta)?.relu()?)?.sum_all()?;
    Ok(((pos + neg)? / (b * b) as f64)?)
}

#[derive(Debug)]
pub struct LossTerms {
    pub pnca: Tensor,
    pub con: Tensor,
    pub total: Tensor,
}

/// Mean ProxyNCA plus (optionally) the contrastive term, unweighted.
pub fn total_loss(
    embeddings: &Tensor,
    labels: &[usize],
    bank: &ProxyBank,
    beta: f64,
    with_contrastive: bool,
) -> Result<LossTerms> {
    let pnca = proxynca_loss(embeddings, labels, bank)?;
    let con = if with_contrastive {
        contrastive_loss(embeddings, labels, beta)?
    } else {
        pnca.zeros_like()?
    };
    let total = (&pnca + &con)?;
    Ok(LossTerms { pnca, con, total })
}

/// Learning rate at `step` of `total` under cosine annealing to zero.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_pnca: f64,
    pub loss_con: f64,
    pub loss_total: f64,
}

/// Decoded training image with its label.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: RgbImage,
    pub label: usize,
}

pub fn load_train_samples(manifest: &DatasetManifest) -> Result<Vec<TrainSample>> {
    manifest
        .split(Split::Train)
        .map(|r| {
            Ok(TrainSample {
                image: dataset::load_rgb(&r.path)?,
                label: r.label,
            })
        })
        .collect()
}

fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut x = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(index as u64);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub struct Trainer<'a> {
    pub model: &'a DvfModel,
    pub bank: ProxyBank,
    cfg: TrainConfig,
    samples: Vec<TrainSample>,
    encoder_opt: AdamW,
    proxy_opt: AdamW,
    step: usize,
    total_steps: usize,
    /// Parameters that last produced a finite loss.
    last_good: Option<NamedTensors>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a DvfModel, samples: Vec<TrainSample>, cfg: TrainConfig) -> Result<Self> {
        cfg.loss.validate()?;
        cfg.augmentation.validate()?;
        if samples.len() < 2 {
            return Err(DvfError::Configuration(
                "training split needs at least two images".into(),
            ));
        }
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let bank = ProxyBank::random(&labels, model.config().encoder.dim, cfg.seed, model.dtype(), model.device())?;
        let adam = |lr: f64| ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        };
        let encoder_opt = AdamW::new(model.vars(), adam(cfg.loss.lr))?;
        let proxy_opt = AdamW::new(
            vec![bank.var().clone()],
            adam(cfg.loss.lr * cfg.loss.proxy_lr_multiplier),
        )?;
        let total_steps = cfg.loss.epochs * Self::batches_per_epoch(samples.len(), cfg.loss.batch_size);
        Ok(Self {
            model,
            bank,
            cfg,
            samples,
            encoder_opt,
            proxy_opt,
            step: 0,
            total_steps,
            last_good: None,
        })
    }

    fn batches_per_epoch(n: usize, batch: usize) -> usize {
        let full = n / batch;
        // A trailing batch of one cannot form pairs and is dropped.
        if n % batch >= 2 {
            full + 1
        } else {
            full.max(1)
        }
    }

    fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.cfg.seed, epoch, usize::MAX));
        order.shuffle(&mut rng);
        let bs = self.cfg.loss.batch_size;
        order
            .chunks(bs)
            .filter(|c| c.len() >= 2)
            .map(|c| c.to_vec())
            .collect()
    }

    fn train_view(&self, index: usize, epoch: usize) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.cfg.seed, epoch, index));
        let policy = &self.cfg.augmentation;
        let mut img = if self.cfg.dmt {
            augment(&self.samples[index].image, policy, &mut rng)
        } else {
            self.samples[index].image.clone()
        };
        if policy.horizontal_flip && rand::Rng::random_bool(&mut rng, 0.5) {
            img = hflip(&img);
        }
        let crop = self.model.config().encoder.image_size as u32;
        resize_crop_to(&img, resize_for_crop(crop), crop, true, &mut rng)
    }

    /// Forward pass and loss on a batch of sample indices.
    pub fn batch_loss(&self, indices: &[usize], epoch: usize) -> Result<LossTerms> {
        let views: Vec<RgbImage> = indices.par_iter().map(|&i| self.train_view(i, epoch)).collect();
        let labels: Vec<usize> = indices.iter().map(|&i| self.samples[i].label).collect();
        let x = images_to_tensor(&views, self.model.dtype(), self.model.device())?;
        let enc = self.model.encode(&x)?;
        total_loss(&enc.embeddings, &labels, &self.bank, self.cfg.loss.beta, self.cfg.dmt)
    }

    pub fn run_epoch(&mut self, epoch: usize) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        for batch in self.epoch_batches(epoch) {
            let lr = cosine_lr(self.cfg.loss.lr, self.step, self.total_steps);
            let terms = self.batch_loss(&batch, epoch)?;
            let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
            let log = StepLog {
                step: self.step,
                epoch,
                lr,
                loss_pnca: scalar(&terms.pnca)?,
                loss_con: scalar(&terms.con)?,
                loss_total: scalar(&terms.total)?,
            };
            if !log.loss_total.is_finite() {
                return Err(DvfError::Numerics(format!(
                    "loss became {} at step {}",
                    log.loss_total, self.step
                )));
            }
            self.last_good = Some(self.checkpoint()?);
            let grads = terms.total.backward()?;
            self.encoder_opt.set_learning_rate(lr);
            self.proxy_opt.set_learning_rate(lr * self.cfg.loss.proxy_lr_multiplier);
            self.encoder_opt.step(&grads)?;
            self.proxy_opt.step(&grads)?;
            self.step += 1;
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn checkpoint(&self) -> Result<NamedTensors> {
        let mut t = self.model.to_tensors()?;
        self.bank.write_into(&mut t)?;
        Ok(t)
    }

    /// Snapshot taken before the most recent update, when its loss was
    /// still finite.
    pub fn last_good(&self) -> Option<&NamedTensors> {
        self.last_good.as_ref()
    }

    pub fn epochs(&self) -> usize {
        self.cfg.loss.epochs
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: Vec<StepLog>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.dvfc";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

/// Trains `model` on the manifest's train split, writing the checkpoint
/// and JSON-lines log under `out_dir`. On a non-finite loss the last
/// parameters with a finite loss are written before the error returns.
pub fn train(model: &DvfModel, manifest: &DatasetManifest, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    let samples = load_train_samples(manifest)?;
    let mut trainer = Trainer::new(model, samples, cfg.clone())?;
    std::fs::create_dir_all(out_dir).map_err(|e| DvfError::io(out_dir, e))?;
    let log_path = out_dir.join(TRAIN_LOG_FILE);
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let file = File::create(&log_path).map_err(|e| DvfError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut steps = Vec::new();
    for epoch in 0..trainer.epochs() {
        let result = trainer.run_epoch(epoch);
        let logs = match result {
            Ok(l) => l,
            Err(e) => {
                match trainer.last_good() {
                    Some(good) => good.save(&ckpt_path)?,
                    None => trainer.checkpoint()?.save(&ckpt_path)?,
                }
                return Err(e);
            }
        };
        for entry in &logs {
            let line = serde_json::to_string(entry).expect("log serializes");
            writeln!(log, "{line}").map_err(|e| DvfError::io(&log_path, e))?;
        }
        log.flush().map_err(|e| DvfError::io(&log_path, e))?;
        if let Some(last) = logs.last() {
            log::info!("epoch {epoch}: loss {:.4}", last.loss_total);
        }
        steps.extend(logs);
    }
    trainer.checkpoint()?.save(&ckpt_path)?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        log: log_path,
        steps,
    })
}
