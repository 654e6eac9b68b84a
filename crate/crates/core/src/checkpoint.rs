//! Named-tensor container.
//!
//! Layout: `u64` little-endian header length, a JSON header
//! `{"metadata": {..}, "tensors": {name: {"shape", "dtype", "offset"}}}`,
//! then the tensor payloads as little-endian `f32`, concatenated in header
//! order. Offsets are byte offsets into the payload section.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{DvfError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    metadata: BTreeMap<String, String>,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NamedTensors {
    pub metadata: BTreeMap<String, String>,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DvfError::Shape(format!(
                "tensor with shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        self.tensors.insert(name.into(), (shape, data));
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, tensor: &Tensor) -> Result<()> {
        let shape = tensor.dims().to_vec();
        let data = tensor.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        self.insert(name, shape, data)
    }

    pub fn insert_vars<'a>(&mut self, vars: impl IntoIterator<Item = (String, &'a Var)>) -> Result<()> {
        for (name, var) in vars {
            self.insert_tensor(name, var.as_tensor())?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors.get(name).map(|(s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Loads `name` as a tensor, checking it has `shape`.
    pub fn tensor(&self, name: &str, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let (s, data) = self
            .get(name)
            .ok_or_else(|| DvfError::Configuration(format!("checkpoint lacks tensor `{name}`")))?;
        if s != shape {
            return Err(DvfError::Shape(format!(
                "checkpoint tensor `{name}` has shape {s:?}, expected {shape:?}"
            )));
        }
        Ok(Tensor::from_slice(data, s, device)?.to_dtype(dtype)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = BTreeMap::new();
        let mut offset = 0u64;
        for (name, (shape, data)) in &self.tensors {
            tensors.insert(
                name.clone(),
                TensorEntry {
                    shape: shape.clone(),
                    dtype: "f32".into(),
                    offset,
                },
            );
            offset += 4 * data.len() as u64;
        }
        let header = Header {
            metadata: self.metadata.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header)
            .map_err(|e| DvfError::Internal(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, data) in self.tensors.values() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| DvfError::Data(format!("invalid checkpoint: {msg}"));
        if bytes.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| DvfError::Data(format!("invalid checkpoint header: {e}")))?;
        let payload = &bytes[header_end..];
        let mut out = NamedTensors {
            metadata: header.metadata,
            tensors: BTreeMap::new(),
        };
        for (name, entry) in header.tensors {
            if entry.dtype != "f32" {
                return Err(bad(&format!("tensor `{name}` has unsupported dtype {}", entry.dtype)));
            }
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * count;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| bad(&format!("tensor `{name}` exceeds payload")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.tensors.insert(name, (entry.shape, data));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            DvfError::Configuration(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut t = NamedTensors::new();
        assert!(t.insert("w", vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn truncated_file_is_data_error() {
        let mut t = NamedTensors::new();
        t.insert("w", vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = t.to_bytes().unwrap();
        assert!(matches!(
            NamedTensors::from_bytes(&bytes[..bytes.len() - 2]),
            Err(DvfError::Data(_))
        ));
    }

    #[test]
    fn tensor_lookup_checks_shape() {
        let mut t = NamedTensors::new();
        t.insert("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let dev = Device::Cpu;
        let w = t.tensor("w", &[2, 2], DType::F64, &dev).unwrap();
        assert_eq!(w.to_vec2::<f64>().unwrap(), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert!(matches!(t.tensor("w", &[4], DType::F32, &dev), Err(DvfError::Shape(_))));
        assert!(matches!(t.tensor("v", &[4], DType::F32, &dev), Err(DvfError::Configuration(_))));
    }

    proptest! {
        #[test]
        fn bytes_round_trip_exactly(
            tensors in prop::collection::btree_map("[a-z.]{1,12}", prop::collection::vec(any::<f32>(), 0..40), 0..6),
            meta in prop::collection::btree_map("[a-z]{1,8}", ".{0,20}", 0..4),
        ) {
            let mut t = NamedTensors::new();
            t.metadata = meta;
            for (name, data) in tensors {
                t.insert(name, vec![data.len()], data).unwrap();
            }
            let bytes = t.to_bytes().unwrap();
            let back = NamedTensors::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
