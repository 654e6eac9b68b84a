//! Semantic-oriented visual filtering.
//!
//! Head-summed class attention from the penultimate layer is reweighted by
//! a learned per-token importance, `O = A + A * Z`, and only the top-k
//! patch tokens (plus the class token) enter the last layer.

use std::collections::HashSet;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::TokenState;
use crate::error::{DvfError, Result};

/// Default number of tokens kept for the last layer.
pub const DEFAULT_K: usize = 12;

/// Affine map `D -> 1` per token followed by a sigmoid.
#[derive(Debug)]
pub struct ImportanceGenerator {
    weight: Var,
    bias: Var,
}

impl ImportanceGenerator {
    /// Zero-initialized, so every token starts at importance 0.5.
    pub fn zeros(dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            weight: Var::zeros((dim, 1), dtype, device)?,
            bias: Var::zeros(1, dtype, device)?,
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || weight.dim(1)? != 1 || bias.dims() != [1] {
            return Err(DvfError::Shape(format!(
                "importance generator expects (D, 1) weight and (1) bias, got {:?} and {:?}",
                weight.dims(),
                bias.dims()
            )));
        }
        Ok(Self {
            weight: Var::from_tensor(&weight)?,
            bias: Var::from_tensor(&bias)?,
        })
    }

    pub fn named_vars(&self) -> Vec<(String, &Var)> {
        vec![
            ("svf.omega.weight".to_string(), &self.weight),
            ("svf.omega.bias".to_string(), &self.bias),
        ]
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    pub fn dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// `sigmoid(tokens . w + b)` for `(B, N, D)` tokens, giving `(B, N)`.
    pub fn token_importance(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, n, d) = tokens.dims3()?;
        let logits = tokens
            .reshape((b * n, d))?
            .matmul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?
            .reshape((b, n))?;
        // 1 / (1 + exp(-x)), built from differentiable primitives.
        Ok((logits.neg()?.exp()? + 1.0)?.recip()?)
    }
}

/// Per-image record of how tokens were chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvfSelection {
    pub ids: Vec<usize>,
    pub fused_score: Vec<f64>,
    pub semantic_score: Vec<f64>,
    pub importance: Vec<f64>,
    pub k: usize,
}

/// Element-wise sum of an `M x N` attention map over heads.
pub fn aggregate_heads(class_attention: &[Vec<f64>]) -> Vec<f64> {
    let n = class_attention.first().map_or(0, Vec::len);
    let mut out = vec![0.0; n];
    for head in class_attention {
        for (o, a) in out.iter_mut().zip(head) {
            *o += a;
        }
    }
    out
}

/// `O[i] = A[i] + A[i] * Z[i]`.
pub fn fuse_scores(semantic: &[f64], importance: &[f64]) -> Result<Vec<f64>> {
    if semantic.len() != importance.len() {
        return Err(DvfError::Shape(format!(
            "semantic score has {} entries, importance {}",
            semantic.len(),
            importance.len()
        )));
    }
    Ok(semantic
        .iter()
        .zip(importance)
        .map(|(a, z)| a + a * z)
        .collect())
}

/// Indices of the `k` largest scores, descending; equal scores keep the
/// lower index first.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(DvfError::Configuration(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Sequence for the last layer: class token followed by the selected patch
/// tokens in `ids` order.
///
/// `gate`, when given, is a `(B, k)` tensor added multiplicatively as
/// `t + t * gate`; pass `z - stop_grad(z)` to route a gradient to the
/// importance generator while leaving values unchanged.
pub fn rebuild_sequence(state: &TokenState, ids: &[Vec<usize>], gate: Option<&Tensor>) -> Result<TokenState> {
    let (b, t, d) = state.tokens.dims3()?;
    let n = t - 1;
    if ids.len() != b {
        return Err(DvfError::Internal(format!(
            "{} selections for a batch of {b}",
            ids.len()
        )));
    }
    let k = ids.first().map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(b * (k + 1));
    for (bi, sel) in ids.iter().enumerate() {
        if sel.len() != k {
            return Err(DvfError::Internal("ragged token selection".into()));
        }
        let mut seen = HashSet::with_capacity(k);
        flat.push((bi * t) as u32);
        for &i in sel {
            if i >= n || !seen.insert(i) {
                return Err(DvfError::Internal(format!(
                    "invalid or duplicate token id {i} in selection of {n} patches"
                )));
            }
            flat.push((bi * t + 1 + i) as u32);
        }
    }
    let device = state.tokens.device();
    let index = Tensor::from_vec(flat, b * (k + 1), device)?;
    let tokens = state
        .tokens
        .reshape((b * t, d))?
        .index_select(&index, 0)?
        .reshape((b, k + 1, d))?;
    let tokens = match gate {
        None => tokens,
        Some(gate) => {
            if gate.dims() != [b, k] {
                return Err(DvfError::Shape(format!(
                    "gate shape {:?} does not match ({b}, {k})",
                    gate.dims()
                )));
            }
            let cls = tokens.narrow(1, 0, 1)?;
            let patches = tokens.narrow(1, 1, k)?;
            let scaled = (&patches + patches.broadcast_mul(&gate.unsqueeze(2)?)?)?;
            Tensor::cat(&[&cls, &scaled], 1)?
        }
    };
    Ok(TokenState {
        tokens,
        layer_index: state.layer_index,
        class_attention: None,
    })
}

/// How the filter runs inside the encoder.
#[derive(Debug, Clone, Copy, Default)]
pub struct SvfHook<'a> {
    /// Tokens kept; clamped to the number of patches.
    pub k: usize,
    /// Learned importance; `None` ranks by class attention alone.
    pub generator: Option<&'a ImportanceGenerator>,
    /// Forces these ids instead of ranking (finite-difference probes).
    pub pinned_ids: Option<&'a [Vec<usize>]>,
    /// Importance values treated as constant in the gate; defaults to the
    /// detached current importance.
    pub reference_importance: Option<&'a Tensor>,
}

impl<'a> SvfHook<'a> {
    pub fn new(k: usize, generator: Option<&'a ImportanceGenerator>) -> Self {
        Self {
            k,
            generator,
            ..Self::default()
        }
    }
}

fn gather_rows(values: &Tensor, ids: &[Vec<usize>]) -> Result<Tensor> {
    let (b, n) = values.dims2()?;
    let k = ids.first().map_or(0, Vec::len);
    let flat: Vec<u32> = ids
        .iter()
        .enumerate()
        .flat_map(|(bi, sel)| sel.iter().map(move |&i| (bi * n + i) as u32))
        .collect();
    let index = Tensor::from_vec(flat, b * k, values.device())?;
    Ok(values.flatten_all()?.index_select(&index, 0)?.reshape((b, k))?)
}

/// Scores the penultimate-layer tokens, picks the top-k per image and
/// rebuilds the last layer's input.
pub fn filter(hook: &SvfHook, state: &TokenState) -> Result<(TokenState, Vec<SvfSelection>)> {
    let attention = state.class_attention.as_ref().ok_or_else(|| {
        DvfError::Internal("token filter needs the penultimate class attention".into())
    })?;
    let (b, t, _) = state.tokens.dims3()?;
    let n = t - 1;
    let k = hook.k.clamp(1, n.max(1));
    let attention = attention.to_dtype(DType::F64)?.to_vec3::<f64>()?;

    let importance = match hook.generator {
        Some(g) => Some(g.token_importance(&state.tokens.narrow(1, 1, n)?)?),
        None => None,
    };
    let z_values = match &importance {
        Some(z) => z.to_dtype(DType::F64)?.to_vec2::<f64>()?,
        None => vec![vec![0.0; n]; b],
    };

    let mut selections = Vec::with_capacity(b);
    for (bi, heads) in attention.iter().enumerate() {
        let semantic = aggregate_heads(heads);
        let fused = fuse_scores(&semantic, &z_values[bi])?;
        let ids = match hook.pinned_ids {
            Some(pinned) => pinned
                .get(bi)
                .cloned()
                .ok_or_else(|| DvfError::Internal("pinned ids shorter than batch".into()))?,
            None => select_topk(&fused, k)?,
        };
        selections.push(SvfSelection {
            k: ids.len(),
            ids,
            fused_score: fused,
            semantic_score: semantic,
            importance: z_values[bi].clone(),
        });
    }

    let ids: Vec<Vec<usize>> = selections.iter().map(|s| s.ids.clone()).collect();
    let gate = match &importance {
        Some(z) => {
            let z_sel = gather_rows(z, &ids)?;
            let z_ref = match hook.reference_importance {
                Some(r) => gather_rows(r, &ids)?,
                None => z_sel.detach(),
            };
            Some((z_sel - z_ref)?)
        }
        None => None,
    };
    let rebuilt = rebuild_sequence(state, &ids, gate.as_ref())?;
    Ok((rebuilt, selections))
}
