//! Importance-guided merge of a task model and a reasoning model with
//! disjoint masks.

use std::time::Instant;

use serde::Serialize;

use super::pipeline::{produce, Output};
use crate::checkpoint::{validate_compatibility, DtypePolicy, NameFilter, RawTensor, Skipped, WeightMap};
use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::scalar::Scalar;
use crate::selection::{exclude, overlap_count, select_bottomk, select_topk, Scope, SelectionMask, ZeroPolicy};
use crate::space::ParamSpace;
use crate::tensor::Tensor;

pub const DEFAULT_RATIO: f64 = 0.05;
pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReasonAnyParams {
    pub p_t: f64,
    pub p_r: f64,
    pub lambda_t: f64,
    pub lambda_r: f64,
    pub scope: Scope,
    pub zero_policy: ZeroPolicy,
}

impl Default for ReasonAnyParams {
    fn default() -> Self {
        Self {
            p_t: DEFAULT_RATIO,
            p_r: DEFAULT_RATIO,
            lambda_t: DEFAULT_LAMBDA,
            lambda_r: DEFAULT_LAMBDA,
            scope: Scope::Global,
            zero_policy: ZeroPolicy::Include,
        }
    }
}

impl ReasonAnyParams {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_t", self.p_t), ("p_r", self.p_r)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        for (name, l) in [("lambda_t", self.lambda_t), ("lambda_r", self.lambda_r)] {
            if !l.is_finite() {
                return Err(Error::Validation(format!("{name} must be finite, got {l}")));
            }
        }
        Ok(())
    }
}

/// `N_t` (most important for the task), `N_r` (least important for
/// reasoning) and the exclusive masks built from them.
#[derive(Debug, Clone)]
pub struct ReasonAnyMasks {
    pub n_t: SelectionMask,
    pub n_r: SelectionMask,
    pub m_t: SelectionMask,
    pub m_r: SelectionMask,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MaskCounts {
    pub n_t: u64,
    pub n_r: u64,
    pub overlap: u64,
    pub t_t: u64,
    pub t_r: u64,
}

impl ReasonAnyMasks {
    pub fn counts(&self) -> Result<MaskCounts> {
        Ok(MaskCounts {
            n_t: self.n_t.count(),
            n_r: self.n_r.count(),
            overlap: overlap_count(&self.n_t, &self.n_r)?,
            t_t: self.m_t.count(),
            t_r: self.m_r.count(),
        })
    }
}

pub fn reason_any_masks(imp_t: &ImportanceMap, imp_r: &ImportanceMap, params: &ReasonAnyParams) -> Result<ReasonAnyMasks> {
    params.validate()?;
    imp_r.space().ensure_same(&imp_t.space(), "reason_any_masks")?;
    let n_t = select_topk(imp_t, params.p_t, params.scope)?;
    let n_r = select_bottomk(imp_r, params.p_r, params.scope, params.zero_policy)?;
    let (m_t, m_r) = exclude(&n_t, &n_r)?;
    Ok(ReasonAnyMasks { n_t, n_r, m_t, m_r })
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MergeReport {
    pub method: String,
    pub eligible_tensors: usize,
    pub eligible_param_count: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masks: Option<MaskCounts>,
    pub skipped: Vec<Skipped>,
    pub warnings: Vec<String>,
    pub notes: Vec<String>,
    /// Wall-clock seconds; the only field that varies between identical runs.
    pub elapsed_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recipe: Option<serde_json::Value>,
}

impl MergeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub(crate) const SCOPE_NOTE: &str =
    "selection ratios apply to merge-eligible parameters only; ranking is by importance, not delta magnitude";

pub(crate) fn filter_note(include: &[String], exclude: &[String]) -> String {
    if include.is_empty() && exclude.is_empty() {
        "no name filters: every shared float tensor (embeddings and norms included) is eligible".into()
    } else {
        format!("name filters: include {include:?}, exclude {exclude:?}")
    }
}

/// Inputs to a reason-any merge. All three models must share the eligible
/// tensors; importance maps must cover them.
pub struct ReasonAnyInputs<'a> {
    pub base: &'a WeightMap,
    pub task: &'a WeightMap,
    pub reasoning: &'a WeightMap,
    pub task_importance: &'a ImportanceMap,
    pub reasoning_importance: &'a ImportanceMap,
}

/// `θ = θ_base + λ_t·(τ_t ⊙ M_t) + λ_r·(τ_r ⊙ M_r)` on the shared float
/// tensors; everything else is copied from the base.
pub fn reason_any_merge<T: Scalar>(
    inputs: &ReasonAnyInputs<'_>,
    params: &ReasonAnyParams,
    filter: &NameFilter,
) -> Result<(WeightMap, MergeReport)> {
    let (out, report) = reason_any_merge_to::<T>(inputs, params, filter, DtypePolicy::Keep, &Output::Memory)?;
    Ok((super::pipeline::expect_memory(out), report))
}

pub(crate) fn reason_any_merge_to<T: Scalar>(
    inputs: &ReasonAnyInputs<'_>,
    params: &ReasonAnyParams,
    filter: &NameFilter,
    policy: DtypePolicy,
    output: &Output,
) -> Result<(Option<WeightMap>, MergeReport)> {
    let start = Instant::now();
    params.validate()?;
    let compat = validate_compatibility(&[inputs.base, inputs.task, inputs.reasoning], filter)?;
    if compat.shared.is_empty() {
        return Err(Error::Consistency(
            "no eligible tensors shared by base, task and reasoning models".into(),
        ));
    }
    let space = ParamSpace::from_compat(&compat, inputs.base)?;
    let imp_t = inputs.task_importance.restrict(&space)?;
    let imp_r = inputs.reasoning_importance.restrict(&space)?;
    let masks = reason_any_masks(&imp_t, &imp_r, params)?;
    let counts = masks.counts()?;

    let mut warnings = Vec::new();
    if counts.t_t == 0 {
        warnings.push("task mask is empty after exclusion; no task parameters were merged".to_string());
    }
    if counts.t_r == 0 {
        warnings.push("reasoning mask is empty after exclusion; no reasoning parameters were merged".to_string());
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let lt = T::lit(params.lambda_t);
    let lr = T::lit(params.lambda_r);
    let base = inputs.base;
    let merged = produce(base, policy, base.metadata().clone(), output, |name| {
        let (Some(mt), Some(mr)) = (masks.m_t.tensor(name), masks.m_r.tensor(name)) else {
            return base.read_raw(name);
        };
        let use_t = lt != T::zero() && mt.any();
        let use_r = lr != T::zero() && mr.any();
        if !use_t && !use_r {
            return base.read_raw(name);
        }
        let raw = base.read_raw(name)?;
        let b = raw.to_tensor::<T>()?;
        let mut data = b.data().to_vec();
        if use_t {
            let t = inputs.task.read_tensor::<T>(name)?;
            for i in mt.iter_ones() {
                data[i] = data[i] + lt * (t.data()[i] - b.data()[i]);
            }
        }
        if use_r {
            let r = inputs.reasoning.read_tensor::<T>(name)?;
            for i in mr.iter_ones() {
                data[i] = data[i] + lr * (r.data()[i] - b.data()[i]);
            }
        }
        RawTensor::from_tensor(&Tensor::new(b.shape().to_vec(), data)?, raw.dtype)
    })?;

    let report = MergeReport {
        method: "reason-any".into(),
        eligible_tensors: compat.shared.len(),
        eligible_param_count: compat.eligible_param_count,
        masks: Some(counts),
        skipped: compat.skipped,
        warnings,
        notes: vec![SCOPE_NOTE.into()],
        elapsed_seconds: start.elapsed().as_secs_f64(),
        recipe: None,
    };
    Ok((merged, report))
}
