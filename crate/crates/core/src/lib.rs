//! Model merging by contrastive gradient identification.
//!
//! Two fine-tuned models share a base: a *task* model and a *reasoning* model.
//! Parameters with the highest gradient importance on task data are taken from
//! the task model, parameters with the lowest importance on reasoning data
//! from the reasoning model, overlapping picks are dropped from both sets, and
//! the two masked task vectors are added to the base.
//!
//! The crate also carries the spectral gradient diagnostics (nuclear norms,
//! layer-wise mean absolute difference), the weight-space baselines (linear,
//! task arithmetic, TIES, DARE) and desk-scale experiments on small dense
//! networks.
//!
//! Numeric code is generic over [`Scalar`]; `f32` is the working precision for
//! real checkpoints and `f64` an exact mode used by tests and toy experiments.

pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod importance;
pub mod merge;
pub mod scalar;
pub mod selection;
pub mod space;
pub mod spectral;
pub mod task_vector;
pub mod tensor;

pub use checkpoint::{open_checkpoint, write_checkpoint, CompatReport, Dtype, DtypePolicy, NameFilter, WeightMap};
pub use error::{Error, Result};
pub use importance::{ImportanceMap, ToyModel};
pub use scalar::Scalar;
pub use selection::{Scope, SelectionMask, ZeroPolicy};
pub use space::ParamSpace;
pub use task_vector::TaskVector;
pub use tensor::Tensor;

/// Production working precision.
pub type Tensor32 = Tensor<f32>;
/// Exact test-mode precision.
pub type Tensor64 = Tensor<f64>;
pub type TaskVector32 = TaskVector<f32>;
pub type TaskVector64 = TaskVector<f64>;
pub type ToyModel64 = ToyModel<f64>;
