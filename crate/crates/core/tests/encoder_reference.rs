//! The candle encoder against a plain nested-loop implementation that
//! reads the same named parameters.

use candle_core::{DType, Device, Tensor};
use dvf::checkpoint::NamedTensors;
use dvf::encoder::{EncoderConfig, VisionTransformer};
use dvf::error::DvfError;
use dvf::svf::{ImportanceGenerator, SvfHook};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

struct Params<'a> {
    t: &'a NamedTensors,
}

impl Params<'_> {
    fn vec(&self, name: &str) -> Vec<f64> {
        self.t.get(name).unwrap_or_else(|| panic!("{name}")).1.iter().map(|&v| v as f64).collect()
    }

    /// `(rows, cols)` row-major matrix.
    fn mat(&self, name: &str) -> Mat {
        let (shape, data) = self.t.get(name).unwrap();
        let cols = *shape.last().unwrap();
        data.chunks(cols).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    }
}

fn affine(x: &[f64], w: &Mat, b: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        for (o, wij) in out.iter_mut().zip(&w[i]) {
            *o += xi * wij;
        }
    }
    out
}

fn layer_norm(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .zip(w.iter().zip(b))
        .map(|(v, (wi, bi))| (v - mean) / (var + 1e-6).sqrt() * wi + bi)
        .collect()
}

fn erf(x: f64) -> f64 {
    // Maclaurin series; arguments here stay small enough to converge fast.
    if x.abs() > 5.0 {
        return x.signum();
    }
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        let add = term / (2 * n + 1) as f64;
        sum += add;
        if add.abs() < 1e-18 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Returns the tokens after one layer and the class-query attention over
/// patch keys for each head.
fn layer(p: &Params, i: usize, x: &Mat, heads: usize) -> (Mat, Mat) {
    let n = |s: &str| format!("blocks.{i}.{s}");
    let d = x[0].len();
    let dh = d / heads;
    let qkv: Mat = x
        .iter()
        .map(|t| affine(&layer_norm(t, &p.vec(&n("norm1.weight")), &p.vec(&n("norm1.bias"))), &p.mat(&n("attn.qkv.weight")), &p.vec(&n("attn.qkv.bias"))))
        .collect();
    let t = x.len();
    let mut mixed = vec![vec![0.0; d]; t];
    let mut cls_attn = vec![Vec::new(); heads];
    for h in 0..heads {
        let q = |r: usize, c: usize| qkv[r][h * dh + c];
        let k = |r: usize, c: usize| qkv[r][d + h * dh + c];
        let v = |r: usize, c: usize| qkv[r][2 * d + h * dh + c];
        for a in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|b| (0..dh).map(|c| q(a, c) * k(b, c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            let w: Vec<f64> = e.iter().map(|v| v / z).collect();
            for c in 0..dh {
                mixed[a][h * dh + c] = (0..t).map(|b| w[b] * v(b, c)).sum();
            }
            if a == 0 {
                cls_attn[h] = w[1..].to_vec();
            }
        }
    }
    let proj_w = p.mat(&n("attn.proj.weight"));
    let proj_b = p.vec(&n("attn.proj.bias"));
    let out = x
        .iter()
        .zip(&mixed)
        .map(|(xi, mi)| {
            let xa: Vec<f64> = xi.iter().zip(affine(mi, &proj_w, &proj_b)).map(|(a, b)| a + b).collect();
            let hidden: Vec<f64> = affine(&layer_norm(&xa, &p.vec(&n("norm2.weight")), &p.vec(&n("norm2.bias"))), &p.mat(&n("mlp.fc1.weight")), &p.vec(&n("mlp.fc1.bias")))
                .into_iter()
                .map(gelu)
                .collect();
            xa.iter().zip(affine(&hidden, &p.mat(&n("mlp.fc2.weight")), &p.vec(&n("mlp.fc2.bias")))).map(|(a, b)| a + b).collect()
        })
        .collect();
    (out, cls_attn)
}

/// Patch tokens plus class token plus position embedding for one
/// `(3, S, S)` image given as `img[c][y][x]`.
fn embed(p: &Params, img: &[Mat], cfg: &EncoderConfig) -> Mat {
    let ps = cfg.patch_size;
    let g = cfg.grid();
    let w = p.mat("patch_embed.weight");
    let b = p.vec("patch_embed.bias");
    let pos = p.mat("pos_embed");
    let mut tokens = vec![p.vec("cls_token")];
    for gy in 0..g {
        for gx in 0..g {
            let mut flat = Vec::with_capacity(3 * ps * ps);
            for plane in img {
                for py in 0..ps {
                    for px in 0..ps {
                        flat.push(plane[gy * ps + py][gx * ps + px]);
                    }
                }
            }
            tokens.push(affine(&flat, &w, &b));
        }
    }
    tokens.iter().zip(&pos).map(|(t, e)| t.iter().zip(e).map(|(a, b)| a + b).collect()).collect()
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Full reference encode; `select` maps penultimate class attention
/// (summed over heads) and patch tokens to the kept ids.
fn reference_encode(p: &Params, img: &[Mat], cfg: &EncoderConfig, select: Option<&dyn Fn(&[f64], &Mat) -> Vec<usize>>) -> Vec<f64> {
    let mut x = embed(p, img, cfg);
    let mut attn = Vec::new();
    for i in 0..cfg.depth - 1 {
        let (nx, a) = layer(p, i, &x, cfg.heads);
        x = nx;
        attn = a;
    }
    if let Some(select) = select {
        let summed: Vec<f64> = (0..attn[0].len()).map(|j| attn.iter().map(|h| h[j]).sum()).collect();
        let ids = select(&summed, &x[1..].to_vec());
        let mut kept = vec![x[0].clone()];
        kept.extend(ids.iter().map(|&i| x[1 + i].clone()));
        x = kept;
    }
    let (out, _) = layer(p, cfg.depth - 1, &x, cfg.heads);
    normalize(&out[0])
}

fn random_images(b: usize, s: usize, seed: u64) -> (Tensor, Vec<Vec<Mat>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let imgs: Vec<Vec<Mat>> = (0..b)
        .map(|_| (0..3).map(|_| (0..s).map(|_| (0..s).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()).collect())
        .collect();
    let flat: Vec<f64> = imgs.iter().flat_map(|i| i.iter().flat_map(|p| p.iter().flatten().copied())).collect();
    (Tensor::from_vec(flat, (b, 3, s, s), &Device::Cpu).unwrap(), imgs)
}

fn tiny() -> EncoderConfig {
    EncoderConfig {
        image_size: 16,
        patch_size: 4,
        depth: 3,
        dim: 12,
        heads: 3,
        mlp_ratio: 2.0,
    }
}

/// Perturbs every parameter away from its default init so LayerNorm
/// gains and biases are exercised too.
fn perturbed(cfg: EncoderConfig, seed: u64) -> (VisionTransformer, NamedTensors) {
    let vit = VisionTransformer::new(cfg, seed, DType::F64, &Device::Cpu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for (_, var) in vit.named_vars() {
        let noise: Vec<f64> = (0..var.elem_count()).map(|_| rng.random_range(-0.3..0.3)).collect();
        let t = Tensor::from_vec(noise, var.dims(), &Device::Cpu).unwrap();
        var.set(&(var.as_tensor() + t).unwrap()).unwrap();
    }
    let mut named = NamedTensors::new();
    named.insert_vars(vit.named_vars()).unwrap();
    (vit, named)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// The named-tensor snapshot is f32, so the reference reads rounded
// weights; reload the model from it so both sides share exact values.
fn aligned(cfg: EncoderConfig, seed: u64) -> (VisionTransformer, NamedTensors) {
    let (_, named) = perturbed(cfg.clone(), seed);
    let vit = VisionTransformer::from_tensors(cfg, &named, "", DType::F64, &Device::Cpu).unwrap();
    (vit, named)
}

#[test]
fn plain_forward_matches_reference() {
    let cfg = tiny();
    let (vit, named) = aligned(cfg.clone(), 3);
    let p = Params { t: &named };
    let (x, imgs) = random_images(3, cfg.image_size, 7);
    let got = vit.encode(&x, None).unwrap().embeddings.to_vec2::<f64>().unwrap();
    for (row, img) in got.iter().zip(&imgs) {
        let want = reference_encode(&p, img, &cfg, None);
        assert!(max_abs_diff(row, &want) < 1e-6, "{row:?} vs {want:?}");
    }
}

#[test]
fn class_attention_matches_reference() {
    let cfg = tiny();
    let (vit, named) = aligned(cfg.clone(), 11);
    let p = Params { t: &named };
    let (x, imgs) = random_images(2, cfg.image_size, 5);
    let state = vit.patchify(&x).unwrap();
    let state = vit.forward_layer(&state).unwrap();
    let attn = state.class_attention.unwrap().to_vec3::<f64>().unwrap();
    for (bi, img) in imgs.iter().enumerate() {
        let (_, want) = layer(&p, 0, &embed(&p, img, &cfg), cfg.heads);
        for h in 0..cfg.heads {
            assert!(max_abs_diff(&attn[bi][h], &want[h]) < 1e-9);
            let mass: f64 = attn[bi][h].iter().sum();
            assert!(mass > 0.0 && mass < 1.0);
        }
    }
}

#[test]
fn filtered_forward_matches_reference() {
    let cfg = tiny();
    let (vit, named) = aligned(cfg.clone(), 21);
    let p = Params { t: &named };
    let (x, imgs) = random_images(2, cfg.image_size, 9);
    let k = 5;
    let topk = |s: &[f64], _: &Mat| {
        let mut ids: Vec<usize> = (0..s.len()).collect();
        ids.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
        ids.truncate(k);
        ids
    };
    let enc = vit.encode(&x, Some(&SvfHook::new(k, None))).unwrap();
    let got = enc.embeddings.to_vec2::<f64>().unwrap();
    for (bi, img) in imgs.iter().enumerate() {
        let want = reference_encode(&p, img, &cfg, Some(&topk));
        assert!(max_abs_diff(&got[bi], &want) < 1e-6);
        assert_eq!(enc.selections[bi].ids.len(), k);
    }

    // With a nonzero importance generator the ranking is A * (1 + Z).
    let weight: Vec<f64> = (0..cfg.dim).map(|i| (i as f64 * 0.37).sin()).collect();
    let gen = ImportanceGenerator::from_tensors(
        Tensor::from_vec(weight.clone(), (cfg.dim, 1), &Device::Cpu).unwrap(),
        Tensor::from_vec(vec![-0.2f64], 1, &Device::Cpu).unwrap(),
    )
    .unwrap();
    let fused = |s: &[f64], tokens: &Mat| {
        let o: Vec<f64> = s
            .iter()
            .zip(tokens)
            .map(|(a, t)| {
                let z = 1.0 / (1.0 + (-(t.iter().zip(&weight).map(|(x, w)| x * w).sum::<f64>() - 0.2)).exp());
                a + a * z
            })
            .collect();
        topk(&o, tokens)
    };
    let enc = vit.encode(&x, Some(&SvfHook::new(k, Some(&gen)))).unwrap();
    let got = enc.embeddings.to_vec2::<f64>().unwrap();
    for (bi, img) in imgs.iter().enumerate() {
        let want = reference_encode(&p, img, &cfg, Some(&fused));
        assert!(max_abs_diff(&got[bi], &want) < 1e-6);
    }
}

#[test]
fn patch_counts_follow_grid() {
    let vit = VisionTransformer::new(EncoderConfig { image_size: 64, ..EncoderConfig::toy() }, 0, DType::F32, &Device::Cpu).unwrap();
    let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
    assert_eq!(vit.patchify(&x).unwrap().tokens.dims(), &[1, 17, 64]);
    let err = vit.patchify(&Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap()).unwrap_err();
    assert!(matches!(err, DvfError::Shape(_)));
    let bad = EncoderConfig { patch_size: 15, ..EncoderConfig::default() };
    assert!(matches!(bad.validate(), Err(DvfError::Shape(_))));
}

#[test]
fn zeroed_branches_are_residual_identity() {
    let cfg = tiny();
    let (vit, _) = perturbed(cfg.clone(), 4);
    vit.zero_residual_branches().unwrap();
    let (x, _) = random_images(2, cfg.image_size, 1);
    let s0 = vit.patchify(&x).unwrap();
    let s1 = vit.forward_layer(&s0).unwrap();
    let diff = (s0.tokens - s1.tokens).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
    assert_eq!(diff, 0.0);
}

#[test]
fn toy_embedding_has_unit_norm() {
    let cfg = EncoderConfig {
        image_size: 64,
        patch_size: 16,
        depth: 2,
        dim: 8,
        heads: 2,
        mlp_ratio: 4.0,
    };
    let vit = VisionTransformer::new(cfg, 2, DType::F32, &Device::Cpu).unwrap();
    let (x, _) = random_images(4, 64, 3);
    let e = vit.encode(&x.to_dtype(DType::F32).unwrap(), Some(&SvfHook::new(12, None))).unwrap();
    for row in e.embeddings.to_vec2::<f32>().unwrap() {
        let n = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6, "{n}");
    }
    assert!(e.selections.iter().all(|s| s.ids.len() == 12));
}
