//! Reason-any merging and the weight-space baselines it is compared against.

mod baselines;
mod pipeline;
mod reason_any;
mod recipe;
mod rng;

pub use baselines::{
    additive_inject, additive_inject_scaled, dare_kernel, dare_merge, dare_process, linear_merge, task_arithmetic_kernel,
    task_arithmetic_merge, ties_elect_merge, ties_kernel, ties_merge, ties_trim, Direction, WEIGHT_SUM_TOLERANCE,
};
pub use reason_any::{
    reason_any_masks, reason_any_merge, MaskCounts, MergeReport, ReasonAnyInputs, ReasonAnyMasks, ReasonAnyParams,
    DEFAULT_LAMBDA, DEFAULT_RATIO,
};
pub(crate) use recipe::parse_method_entry;
pub use recipe::{run_recipe, ImportanceSource, Method, MethodSpec, Recipe, RECIPE_KEYS};
pub use rng::{KeyedStream, DARE_STREAM_VERSION};

/// Default λ for task arithmetic, TIES and DARE.
pub const BASELINE_LAMBDA: f64 = 0.3;
/// Default DARE drop rate.
pub const DEFAULT_DROP_RATE: f64 = 0.9;
/// Default TIES density: the same 0.9 pruning rate as DARE.
pub const DEFAULT_DENSITY: f64 = 0.1;
/// Additive-injection ratio grid.
pub const INJECTION_GRID: [f64; 3] = [0.10, 0.05, 0.01];
