//! In-memory tensors and checkpoints.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype '{other}'"))),
        }
    }

    pub fn elem_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// A named, shaped, dense float tensor. Row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let t = Tensor { name: name.into(), shape, data: TensorData::F32(data) };
        debug_assert_eq!(t.numel(), t.len());
        t
    }

    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        let t = Tensor { name: name.into(), shape, data: TensorData::F64(data) };
        debug_assert_eq!(t.numel(), t.len());
        t
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nbytes(&self) -> usize {
        self.len() * self.dtype().elem_size()
    }

    /// Element as f64 (exact for both dtypes).
    pub fn get(&self, i: usize) -> f64 {
        match &self.data {
            TensorData::F32(v) => v[i] as f64,
            TensorData::F64(v) => v[i],
        }
    }

    /// Flat index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        match &self.data {
            TensorData::F32(v) => v.iter().position(|x| !x.is_finite()),
            TensorData::F64(v) => v.iter().position(|x| !x.is_finite()),
        }
    }
}

/// Role tags a checkpoint may carry in its meta.
pub const ROLES: [&str; 7] =
    ["base", "sft-instruct", "sft-reason", "merged", "rm", "critic", "actor"];

/// A set of named tensors plus string metadata. Iteration is always in
/// lexicographic tensor-name order (that is also the on-disk payload order).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: BTreeMap<String, String>) -> Self {
        Checkpoint { meta, tensors: BTreeMap::new() }
    }

    /// Insert a tensor; the key is its name. Rejects empty or duplicate names.
    pub fn insert(&mut self, t: Tensor) -> Result<()> {
        if t.name.is_empty() {
            return Err(Error::Format("tensor with empty name".into()));
        }
        if t.numel() != t.len() {
            return Err(Error::Format(format!(
                "tensor '{}': shape {:?} does not match {} elements",
                t.name,
                t.shape,
                t.len()
            )));
        }
        if self.tensors.contains_key(&t.name) {
            return Err(Error::Format(format!("duplicate tensor name '{}'", t.name)));
        }
        self.tensors.insert(t.name.clone(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn n_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn role(&self) -> Option<&str> {
        self.meta.get("role").map(|s| s.as_str())
    }

    /// Structural checks shared by save and load: required meta keys, a known
    /// role tag when present, shape/data agreement and finiteness everywhere.
    pub fn validate(&self) -> Result<()> {
        for key in ["arch", "vocab"] {
            if !self.meta.contains_key(key) {
                return Err(Error::Format(format!("checkpoint meta missing required key '{key}'")));
            }
        }
        if let Some(role) = self.role() {
            if !ROLES.contains(&role) {
                return Err(Error::Format(format!("unknown role tag '{role}'")));
            }
        }
        for (name, t) in &self.tensors {
            if t.numel() != t.len() {
                return Err(Error::Format(format!(
                    "tensor '{name}': shape/data length mismatch"
                )));
            }
            if let Some(i) = t.first_non_finite() {
                return Err(Error::NonFinite { tensor: name.clone(), index: i });
            }
        }
        Ok(())
    }
}
