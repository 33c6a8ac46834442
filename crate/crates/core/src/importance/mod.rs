//! Gradient-magnitude importance: the per-parameter mean of |dL/dθ| over a
//! calibration set, plus a small dense-network oracle that produces such
//! gradients without an external ML stack.

mod calib;
mod toy;

use std::collections::BTreeMap;
use std::path::Path;

pub use calib::{CalibrationSet, Sample, Target, DEFAULT_SAMPLE_CAP};
pub use toy::{finite_diff_gradient, toy_importance, Activation, DenseLayer, LossKind, ToyModel};

use crate::checkpoint::{write_checkpoint, Dtype, WeightMap, WriteOptions};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::space::ParamSpace;
use crate::tensor::Tensor;

/// Per-parameter gradients keyed by tensor name.
pub type GradientMap<T> = BTreeMap<String, Tensor<T>>;

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct Provenance {
    pub calibration_id: String,
    pub sample_count: usize,
    pub model_id: String,
}

/// Non-negative, finite importance scores (f32) per eligible tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    scores: BTreeMap<String, Tensor<f32>>,
    pub provenance: Provenance,
}

impl ImportanceMap {
    /// Validates every score. Negative zero is normalized to +0 so that score
    /// bit patterns order like the values.
    pub fn new(mut scores: BTreeMap<String, Tensor<f32>>, provenance: Provenance) -> Result<Self> {
        for (name, t) in scores.iter_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Validation(format!("non-finite importance at {name}[{i}]")));
                }
                if *v < 0.0 {
                    return Err(Error::Validation(format!("negative importance at {name}[{i}]")));
                }
                if *v == 0.0 {
                    *v = 0.0;
                }
            }
        }
        Ok(Self { scores, provenance })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.scores.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.scores.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn space(&self) -> ParamSpace {
        ParamSpace::new(self.scores.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())))
    }

    /// Restrict to the given space, failing if a tensor is missing or shaped
    /// differently.
    pub fn restrict(&self, space: &ParamSpace) -> Result<ImportanceMap> {
        let mut scores = BTreeMap::new();
        for (name, shape) in space.iter() {
            let t = self
                .scores
                .get(name)
                .ok_or_else(|| Error::Validation(format!("importance missing for {name}")))?;
            if t.shape() != shape {
                return Err(Error::Validation(format!(
                    "importance for {name} has shape {:?}, model has {shape:?}",
                    t.shape()
                )));
            }
            scores.insert(name.to_string(), t.clone());
        }
        Ok(Self {
            scores,
            provenance: self.provenance.clone(),
        })
    }

    /// Multiply every score by `c` (c > 0).
    pub fn scaled(&self, c: f32) -> Result<ImportanceMap> {
        let scores = self.scores.iter().map(|(n, t)| (n.clone(), t.map(|v| v * c))).collect();
        ImportanceMap::new(scores, self.provenance.clone())
    }

    pub fn to_weight_map(&self) -> WeightMap {
        let mut map = WeightMap::new();
        for (name, t) in &self.scores {
            map.insert_native(name.clone(), t);
        }
        let meta = map.metadata_mut();
        meta.insert("calibration_id".into(), self.provenance.calibration_id.clone());
        meta.insert("sample_count".into(), self.provenance.sample_count.to_string());
        meta.insert("model_id".into(), self.provenance.model_id.clone());
        map
    }
}

/// Mean of per-sample absolute gradients. Accumulates in f64 in the order the
/// samples are given and emits f32.
pub fn average_abs_gradients<T: Scalar>(grads: &[GradientMap<T>]) -> Result<ImportanceMap> {
    let first = grads
        .first()
        .ok_or_else(|| Error::Precondition("no gradient samples to average".into()))?;
    let mut sums: BTreeMap<&str, (Vec<usize>, Vec<f64>)> = first
        .iter()
        .map(|(n, t)| (n.as_str(), (t.shape().to_vec(), vec![0.0; t.numel()])))
        .collect();
    for (s, g) in grads.iter().enumerate() {
        if g.len() != sums.len() {
            return Err(Error::Consistency(format!(
                "gradient sample {s} has {} tensors, expected {}",
                g.len(),
                sums.len()
            )));
        }
        for (name, t) in g {
            let (shape, acc) = sums
                .get_mut(name.as_str())
                .ok_or_else(|| Error::Consistency(format!("gradient sample {s} has unexpected tensor {name}")))?;
            if shape.as_slice() != t.shape() {
                return Err(Error::Consistency(format!(
                    "gradient sample {s}: {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            for (a, v) in acc.iter_mut().zip(t.data()) {
                *a += v.to_f64_exact().abs();
            }
        }
    }
    let n = grads.len() as f64;
    let scores = sums
        .into_iter()
        .map(|(name, (shape, acc))| {
            let data = acc.into_iter().map(|v| (v / n) as f32).collect();
            (name.to_string(), Tensor::new(shape, data).expect("shape preserved"))
        })
        .collect();
    ImportanceMap::new(
        scores,
        Provenance {
            sample_count: grads.len(),
            ..Provenance::default()
        },
    )
}

/// Load an importance file and validate it against `model`. Every float tensor
/// of the model in `required` (all float tensors when `None`) must be present.
pub fn load_importance(path: impl AsRef<Path>, model: &WeightMap, required: Option<&ParamSpace>) -> Result<ImportanceMap> {
    let file = WeightMap::open(path)?;
    let mut scores = BTreeMap::new();
    for name in file.names() {
        let model_shape = model
            .shape(name)
            .map_err(|_| Error::Validation(format!("importance tensor {name} is not in the model")))?;
        if file.shape(name)? != model_shape {
            return Err(Error::Validation(format!(
                "importance for {name} has shape {:?}, model has {model_shape:?}",
                file.shape(name)?
            )));
        }
        if file.dtype(name)? != Dtype::F32 {
            return Err(Error::Validation(format!(
                "importance for {name} must be F32, found {}",
                file.dtype(name)?
            )));
        }
        scores.insert(name.to_string(), file.read_f32(name)?);
    }
    let meta = file.metadata();
    let provenance = Provenance {
        calibration_id: meta.get("calibration_id").cloned().unwrap_or_default(),
        sample_count: meta.get("sample_count").and_then(|s| s.parse().ok()).unwrap_or(0),
        model_id: meta.get("model_id").cloned().unwrap_or_default(),
    };
    let map = ImportanceMap::new(scores, provenance)?;
    let required = match required {
        Some(space) => space.clone(),
        None => ParamSpace::new(
            model
                .names()
                .filter(|n| model.dtype(n).map(|d| d.is_float()).unwrap_or(false))
                .map(|n| (n.to_string(), model.shape(n).unwrap().to_vec())),
        ),
    };
    map.restrict(&required)
}

pub fn save_importance(path: impl AsRef<Path>, imp: &ImportanceMap) -> Result<()> {
    write_checkpoint(
        path,
        &imp.to_weight_map(),
        WriteOptions {
            strict_finite: true,
            ..WriteOptions::default()
        },
    )
}
