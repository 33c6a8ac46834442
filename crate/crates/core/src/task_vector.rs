//! Fine-tuning displacements `τ = θ_fine − θ_base` and masked, scaled
//! re-application onto a base model.

use std::collections::BTreeMap;

use bitvec::prelude::*;

use crate::checkpoint::{CompatReport, WeightMap};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::selection::SelectionMask;
use crate::space::ParamSpace;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector<T> {
    deltas: BTreeMap<String, Tensor<T>>,
    pub base_id: String,
    pub fine_id: String,
}

/// `fine[name] − base[name]` in working precision.
pub fn delta_tensor<T: Scalar>(fine: &WeightMap, base: &WeightMap, name: &str) -> Result<Tensor<T>> {
    let f = fine.read_tensor::<T>(name)?;
    let b = base.read_tensor::<T>(name)?;
    if f.shape() != b.shape() {
        return Err(Error::Consistency(format!(
            "{name}: fine-tuned shape {:?} differs from base {:?}",
            f.shape(),
            b.shape()
        )));
    }
    let data = f.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    Tensor::new(b.shape().to_vec(), data)
}

pub fn compute_task_vector<T: Scalar>(fine: &WeightMap, base: &WeightMap, compat: &CompatReport) -> Result<TaskVector<T>> {
    let mut deltas = BTreeMap::new();
    for name in &compat.shared {
        if !fine.contains(name) || !base.contains(name) {
            return Err(Error::Consistency(format!(
                "compatibility report is stale: {name} is missing from an input"
            )));
        }
        deltas.insert(name.clone(), delta_tensor(fine, base, name)?);
    }
    Ok(TaskVector {
        deltas,
        base_id: base.metadata().get("model_id").cloned().unwrap_or_default(),
        fine_id: fine.metadata().get("model_id").cloned().unwrap_or_default(),
    })
}

impl<T: Scalar> TaskVector<T> {
    pub fn new(deltas: BTreeMap<String, Tensor<T>>) -> Self {
        Self {
            deltas,
            base_id: String::new(),
            fine_id: String::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.deltas.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.deltas.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn space(&self) -> ParamSpace {
        ParamSpace::new(self.deltas.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())))
    }

    pub fn map(&self, f: impl Fn(&str, &Tensor<T>) -> Tensor<T>) -> TaskVector<T> {
        TaskVector {
            deltas: self.deltas.iter().map(|(n, t)| (n.clone(), f(n, t))).collect(),
            base_id: self.base_id.clone(),
            fine_id: self.fine_id.clone(),
        }
    }

    /// Export as F32 tensors named like the model.
    pub fn to_weight_map(&self) -> Result<WeightMap> {
        let mut map = WeightMap::new();
        for (name, t) in &self.deltas {
            map.insert(name.clone(), t, crate::checkpoint::Dtype::F32)?;
        }
        map.metadata_mut().insert("base_id".into(), self.base_id.clone());
        map.metadata_mut().insert("fine_id".into(), self.fine_id.clone());
        Ok(map)
    }
}

/// `base[i] + scale·delta[i]` where the mask is set, `base[i]` elsewhere.
pub fn masked_update<T: Scalar>(base: &[T], delta: &[T], mask: &BitSlice<u64, Lsb0>, scale: T) -> Vec<T> {
    // b + 0·d would turn -0 into +0
    if scale == T::zero() {
        return base.to_vec();
    }
    base.iter()
        .zip(delta)
        .zip(mask.iter().by_vals())
        .map(|((&b, &d), on)| if on { b + scale * d } else { b })
        .collect()
}

/// `θ' = θ_base + λ·(τ ⊙ M)`. Output tensors keep the base dtype; tensors
/// outside the task vector (and tensors with an empty mask) are copied from the
/// base byte for byte.
pub fn apply_masked_delta<T: Scalar>(base: &WeightMap, tv: &TaskVector<T>, mask: &SelectionMask, scale: T) -> Result<WeightMap> {
    tv.space().ensure_same(mask.space(), "apply_masked_delta")?;
    let mut out = WeightMap::new();
    *out.metadata_mut() = base.metadata().clone();
    for name in base.names() {
        let raw = base.read_raw(name)?;
        let bits = match (tv.get(name), mask.tensor(name)) {
            (Some(_), Some(bits)) if bits.any() => bits,
            _ => {
                out.insert_raw(name, raw);
                continue;
            }
        };
        let delta = tv.get(name).unwrap();
        let b = raw.to_tensor::<T>()?;
        if b.shape() != delta.shape() {
            return Err(Error::Consistency(format!(
                "{name}: base shape {:?} differs from task vector {:?}",
                b.shape(),
                delta.shape()
            )));
        }
        let data = masked_update(b.data(), delta.data(), bits, scale);
        out.insert(name, &Tensor::new(b.shape().to_vec(), data)?, raw.dtype)?;
    }
    for name in tv.deltas.keys() {
        if !base.contains(name) {
            return Err(Error::Consistency(format!("task vector tensor {name} is not in the base model")));
        }
    }
    Ok(out)
}
