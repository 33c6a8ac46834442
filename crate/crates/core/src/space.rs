use std::collections::BTreeMap;

use crate::checkpoint::{CompatReport, WeightMap};
use crate::error::{Error, Result};

/// The eligible parameter space: tensor names in canonical order with their
/// shapes. Global flat indices run over tensors in this order, row-major
/// within each tensor.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamSpace {
    tensors: BTreeMap<String, Vec<usize>>,
}

impl ParamSpace {
    pub fn new(tensors: impl IntoIterator<Item = (String, Vec<usize>)>) -> Self {
        Self {
            tensors: tensors.into_iter().collect(),
        }
    }

    /// The `shared` tensors of a compatibility report, shaped as in `model`.
    pub fn from_compat(compat: &CompatReport, model: &WeightMap) -> Result<Self> {
        compat
            .shared
            .iter()
            .map(|n| Ok((n.clone(), model.shape(n)?.to_vec())))
            .collect::<Result<BTreeMap<_, _>>>()
            .map(|tensors| Self { tensors })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.tensors.iter().map(|(n, s)| (n.as_str(), s.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.tensors.get(name).map(Vec::as_slice)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count `d`.
    pub fn numel(&self) -> u64 {
        self.tensors.values().map(|s| s.iter().product::<usize>() as u64).sum()
    }

    pub fn ensure_same(&self, other: &ParamSpace, what: &str) -> Result<()> {
        if self == other {
            return Ok(());
        }
        let detail = self
            .tensors
            .iter()
            .find(|(n, s)| other.tensors.get(*n) != Some(*s))
            .map(|(n, _)| format!("tensor {n} differs"))
            .or_else(|| {
                other
                    .tensors
                    .keys()
                    .find(|n| !self.tensors.contains_key(*n))
                    .map(|n| format!("unexpected tensor {n}"))
            })
            .unwrap_or_default();
        Err(Error::Consistency(format!("{what}: parameter space mismatch ({detail})")))
    }
}
