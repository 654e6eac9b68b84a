//! Finite-difference probe over the full model and loss at 64-bit.

#![allow(dead_code)]

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use dvf::encoder::EncoderConfig;
use dvf::model::{DvfModel, ModelConfig};
use dvf::svf::SvfHook;
use dvf::training::{total_loss, LossTerms, ProxyBank};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    Omega,
    Encoder,
    Proxies,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    ProxyNca,
    Contrastive,
    Total,
}

impl Term {
    fn pick(self, t: &LossTerms) -> &Tensor {
        match self {
            Term::ProxyNca => &t.pnca,
            Term::Contrastive => &t.con,
            Term::Total => &t.total,
        }
    }
}

pub fn randn(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

/// L=2, D=8, M=2, N=16 encoder with C=3 proxies and a batch of 4. The
/// top-k ids and the importance reference are frozen at construction so
/// the loss is smooth in every parameter.
pub struct Probe {
    pub model: DvfModel,
    pub bank: ProxyBank,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<Vec<usize>>,
    pub z_ref: Tensor,
    pub k: usize,
    pub beta: f64,
}

impl Probe {
    pub fn new(seed: u64) -> Self {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                image_size: 16,
                patch_size: 4,
                depth: 2,
                dim: 8,
                heads: 2,
                mlp_ratio: 2.0,
            },
            svf_enabled: true,
            k: 12,
            importance_generator: true,
        };
        let model = DvfModel::new(cfg, seed, DType::F64, &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        // Larger-than-init weights so every parameter has a visible effect.
        for (name, var) in model.named_vars() {
            let t = var.as_tensor();
            // Small importance weights keep the sigmoid out of saturation.
            let scale = if name.starts_with("svf.") { 0.02 } else { 0.3 };
            let noise = randn(t.dims(), scale, &mut rng);
            var.set(&(t + noise).unwrap()).unwrap();
        }
        let labels = vec![0, 1, 2, 0];
        let bank = ProxyBank::random(&[0, 1, 2], 8, seed, DType::F64, &Device::Cpu).unwrap();
        let images = randn(&[4, 3, 16, 16], 1.0, &mut rng);

        let state = model.encoder.forward_to_penultimate(&images).unwrap();
        let z_ref = model
            .importance
            .token_importance(&state.tokens.narrow(1, 1, 16).unwrap())
            .unwrap()
            .detach();
        let hook = SvfHook::new(12, Some(&model.importance));
        let ids = model
            .encoder
            .encode(&images, Some(&hook))
            .unwrap()
            .selections
            .into_iter()
            .map(|s| s.ids)
            .collect();
        Self {
            model,
            bank,
            images,
            labels,
            ids,
            z_ref,
            k: 12,
            beta: 0.5,
        }
    }

    pub fn losses(&self) -> LossTerms {
        let hook = SvfHook {
            k: self.k,
            generator: Some(&self.model.importance),
            pinned_ids: Some(&self.ids),
            reference_importance: Some(&self.z_ref),
        };
        let enc = self.model.encoder.encode(&self.images, Some(&hook)).unwrap();
        total_loss(&enc.embeddings, &self.labels, &self.bank, self.beta, true).unwrap()
    }

    pub fn params(&self) -> Vec<(String, Group, Var)> {
        let mut out: Vec<(String, Group, Var)> = self
            .model
            .named_vars()
            .into_iter()
            .map(|(n, v)| {
                let g = if n.starts_with("svf.") { Group::Omega } else { Group::Encoder };
                (n, g, v.clone())
            })
            .collect();
        out.push(("proxies".into(), Group::Proxies, self.bank.var().clone()));
        out
    }
}

fn set_flat(var: &Var, flat: &[f64]) {
    let t = Tensor::from_vec(flat.to_vec(), var.dims(), &Device::Cpu).unwrap();
    var.set(&t).unwrap();
}

/// Relative error `|a - f| / max(|a|, |f|)` per parameter group, norms
/// taken over up to `per_tensor` sampled coordinates of every tensor. A
/// group with zero analytic and numeric gradient reports 0.
pub fn gradient_errors(probe: &Probe, term: Term, per_tensor: usize, h: f64) -> BTreeMap<Group, f64> {
    let terms = probe.losses();
    let grads = term.pick(&terms).backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut acc: BTreeMap<Group, (f64, f64, f64)> = BTreeMap::new();
    for (_, group, var) in probe.params() {
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; base.len()],
        };
        let coords: Vec<usize> = if base.len() <= per_tensor {
            (0..base.len()).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..base.len())).collect()
        };
        for i in coords {
            let at = |offset: f64| {
                let mut p = base.clone();
                p[i] = base[i] + offset;
                set_flat(&var, &p);
                term.pick(&probe.losses()).to_scalar::<f64>().unwrap()
            };
            // Fourth-order central stencil.
            let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            set_flat(&var, &base);
            let e = acc.entry(group).or_default();
            e.0 += (analytic[i] - fd).powi(2);
            e.1 += analytic[i].powi(2);
            e.2 += fd.powi(2);
        }
    }
    acc.into_iter()
        .map(|(g, (diff, a, f))| {
            let scale = a.max(f).sqrt();
            let rel = if scale == 0.0 { 0.0 } else { diff.sqrt() / scale };
            (g, rel)
        })
        .collect()
}
