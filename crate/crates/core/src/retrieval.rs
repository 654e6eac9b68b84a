//! Embedding store, exact cosine search and Recall@K.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{self, ImageRecord};
use crate::error::{DvfError, Result};
use crate::model::DvfModel;

const STORE_MAGIC: &[u8; 4] = b"DVFE";
const STORE_VERSION: u32 = 1;
pub const DEFAULT_KS: [usize; 4] = [1, 2, 4, 8];

/// Row-normalized embeddings with parallel ids and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    labels: Vec<usize>,
    dim: usize,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct StoreIndex {
    ids: Vec<String>,
    labels: Vec<usize>,
}

impl EmbeddingStore {
    /// Builds a store, L2-normalizing every row.
    pub fn new(ids: Vec<String>, labels: Vec<usize>, rows: Vec<Vec<f32>>, dim: usize) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != rows.len() {
            return Err(DvfError::Shape(format!(
                "store arrays disagree: {} ids, {} labels, {} rows",
                ids.len(),
                labels.len(),
                rows.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(DvfError::Data(format!("duplicate id {id} in embedding store")));
            }
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, row) in ids.iter().zip(&rows) {
            if row.len() != dim {
                return Err(DvfError::Shape(format!("row {id} has {} dims, expected {dim}", row.len())));
            }
            data.extend(normalize(row).ok_or_else(|| {
                DvfError::Numerics(format!("embedding {id} has zero or non-finite norm"))
            })?);
        }
        Ok(Self { ids, labels, dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            ids: Vec::new(),
            labels: Vec::new(),
            dim,
            data: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let index = serde_json::to_vec(&StoreIndex {
            ids: self.ids.clone(),
            labels: self.labels.clone(),
        })
        .map_err(|e| DvfError::Internal(format!("store index: {e}")))?;
        let mut out = Vec::with_capacity(20 + index.len() + 4 * self.data.len());
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(index.len() as u32).to_le_bytes());
        out.extend_from_slice(&index);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Parses the store file format. Rows are taken verbatim.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| DvfError::Data(format!("invalid embedding store: {m}"));
        let u32_at = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| bad("truncated header"))
        };
        if bytes.get(..4) != Some(STORE_MAGIC.as_slice()) {
            return Err(bad("missing DVFE magic"));
        }
        let version = u32_at(4)?;
        if version != STORE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = u32_at(8)? as usize;
        let dim = u32_at(12)? as usize;
        let index_len = u32_at(16)? as usize;
        let index_bytes = bytes.get(20..20 + index_len).ok_or_else(|| bad("truncated index"))?;
        let index: StoreIndex =
            serde_json::from_slice(index_bytes).map_err(|e| bad(&e.to_string()))?;
        if index.ids.len() != count || index.labels.len() != count {
            return Err(bad("index length disagrees with header count"));
        }
        let payload = &bytes[20 + index_len..];
        if payload.len() != 4 * count * dim {
            return Err(bad("payload size disagrees with count x dim"));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            ids: index.ids,
            labels: index.labels,
            dim,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            DvfError::Configuration(format!("cannot read embedding store {}: {e}", path.display()))
        })?;
        Self::from_bytes(&bytes)
    }
}

fn normalize(row: &[f32]) -> Option<Vec<f32>> {
    let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return None;
    }
    Some(row.iter().map(|&v| (v as f64 / norm) as f32).collect())
}

/// Cosine similarity of two unit rows, accumulated in `f64`.
pub fn similarity(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// The `k` rows most similar to `query`, descending, ties to the lower
/// row index. `exclude` drops one row (the query itself).
pub fn search(store: &EmbeddingStore, query: &[f32], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = (0..store.len())
        .filter(|&i| Some(i) != exclude)
        .map(|i| (i, similarity(query, store.row(i))))
        .collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    scored
}

/// Nearest `k` neighbours of stored row `query_index`, itself excluded.
pub fn knn(store: &EmbeddingStore, query_index: usize, k: usize) -> Result<Vec<usize>> {
    if query_index >= store.len() {
        return Err(DvfError::Configuration(format!(
            "query index {query_index} outside store of {}",
            store.len()
        )));
    }
    if k == 0 || k + 1 > store.len() {
        return Err(DvfError::Configuration(format!(
            "k = {k} needs 1 <= k <= {}",
            store.len().saturating_sub(1)
        )));
    }
    Ok(search(store, store.row(query_index), k, Some(query_index))
        .into_iter()
        .map(|(i, _)| i)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub top_ids: Vec<String>,
    /// 1-based rank of the first same-label neighbour within `top_ids`.
    pub hit_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub per_query: Vec<QueryResult>,
    pub warnings: Vec<String>,
    pub config_snapshot: serde_json::Value,
}

impl EvalReport {
    /// Recall@K table with values as percentages.
    pub fn table(&self) -> String {
        let mut header = String::new();
        let mut values = String::new();
        for (k, r) in &self.recall_at {
            header.push_str(&format!(" {:>9}", format!("Recall@{k}")));
            values.push_str(&format!(" {:>9.1}", 100.0 * r));
        }
        format!("{:<8}{header}\n{:<8}{values}\n", "", "DVF")
    }
}

/// Leave-one-out Recall@K over the whole store: every image queries all
/// others and scores a hit at `K` if any of its top `K` shares its label.
pub fn recall_at_k(store: &EmbeddingStore, ks: &[usize]) -> Result<EvalReport> {
    let mut ks: Vec<usize> = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let max_k = *ks
        .last()
        .ok_or_else(|| DvfError::Configuration("no K values requested".into()))?;
    if ks[0] == 0 || max_k + 1 > store.len() {
        return Err(DvfError::Configuration(format!(
            "Recall@K needs 1 <= K <= {} for a store of {}",
            store.len().saturating_sub(1),
            store.len()
        )));
    }
    let mut label_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in store.labels() {
        *label_counts.entry(l).or_default() += 1;
    }
    let warnings = label_counts
        .iter()
        .filter(|(_, &c)| c < 2)
        .map(|(l, _)| format!("label {l} has a single image; its query can never hit"))
        .collect();

    let mut hits = vec![0usize; ks.len()];
    let mut per_query = Vec::with_capacity(store.len());
    for q in 0..store.len() {
        let top = knn(store, q, max_k)?;
        let label = store.labels()[q];
        let hit_rank = top.iter().position(|&i| store.labels()[i] == label).map(|p| p + 1);
        if let Some(rank) = hit_rank {
            for (slot, &k) in ks.iter().enumerate() {
                if rank <= k {
                    hits[slot] += 1;
                }
            }
        }
        per_query.push(QueryResult {
            query_id: store.ids()[q].clone(),
            top_ids: top.iter().map(|&i| store.ids()[i].clone()).collect(),
            hit_rank,
        });
    }
    let n = store.len() as f64;
    let recall_at = ks.iter().zip(&hits).map(|(&k, &h)| (k, h as f64 / n)).collect();
    Ok(EvalReport {
        recall_at,
        per_query,
        warnings,
        config_snapshot: serde_json::Value::Null,
    })
}

/// Embeds every record with eval preprocessing. Undecodable images are
/// errors, never skipped.
pub fn embed_corpus(records: &[&ImageRecord], model: &DvfModel, batch_size: usize) -> Result<EmbeddingStore> {
    let dim = model.config().encoder.dim;
    if records.is_empty() {
        return Ok(EmbeddingStore::empty(dim));
    }
    let mut rows = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let views = chunk
            .iter()
            .map(|r| Ok(model.eval_view(&dataset::load_rgb(&r.path)?)))
            .collect::<Result<Vec<_>>>()?;
        rows.extend(model.embed_views(&views, batch_size)?);
    }
    EmbeddingStore::new(
        records.iter().map(|r| r.id.clone()).collect(),
        records.iter().map(|r| r.label).collect(),
        rows,
        dim,
    )
}
