//! Weight-space baselines: linear averaging, task arithmetic, TIES and DARE.
//!
//! Each method has a per-tensor kernel over working-precision slices; the
//! task-vector functions here and the file-streaming recipe runner both go
//! through the same kernels.

use std::cmp::Ordering;

use super::pipeline::{expect_memory, produce, shape_check, Output};
use super::rng::KeyedStream;
use crate::checkpoint::{validate_compatibility, CompatReport, DtypePolicy, NameFilter, RawTensor, WeightMap};
use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::scalar::Scalar;
use crate::selection::{select_bottomk, select_topk, Scope, ZeroPolicy};
use crate::task_vector::{apply_masked_delta, delta_tensor, TaskVector};
use crate::tensor::Tensor;

/// Tolerance on `Σ weights == 1` for linear merges.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// `b + λ·Σ deltas`, summing from zero in the given order.
pub fn task_arithmetic_kernel<T: Scalar>(base: &[T], deltas: &[&[T]], lambda: T) -> Vec<T> {
    (0..base.len())
        .map(|i| {
            let sum = deltas.iter().fold(T::zero(), |acc, d| acc + d[i]);
            base[i] + lambda * sum
        })
        .collect()
}

/// Keep the `round(density·n)` largest-magnitude entries (ties to the lower
/// index) and zero the rest.
pub fn ties_trim<T: Scalar>(delta: &[T], density: f64) -> Vec<T> {
    let k = crate::selection::target_count(density, delta.len() as u64) as usize;
    let mut out = vec![T::zero(); delta.len()];
    if k == 0 {
        return out;
    }
    let mut order: Vec<usize> = (0..delta.len()).collect();
    let cmp = |&a: &usize, &b: &usize| -> Ordering {
        delta[b]
            .abs()
            .partial_cmp(&delta[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
    }
    for &i in &order[..k] {
        out[i] = delta[i];
    }
    out
}

/// Sign election and disjoint mean over already-trimmed deltas. The elected
/// sign is the one with the larger summed magnitude (ties go positive); the
/// merged value is the mean of entries carrying that sign, or zero if none do.
pub fn ties_elect_merge<T: Scalar>(trimmed: &[&[T]]) -> Vec<T> {
    let n = trimmed.first().map_or(0, |t| t.len());
    (0..n)
        .map(|i| {
            let (mut pos, mut neg) = (T::zero(), T::zero());
            for t in trimmed {
                let v = t[i];
                if v > T::zero() {
                    pos += v;
                } else if v < T::zero() {
                    neg -= v;
                }
            }
            let positive = pos >= neg;
            let (mut sum, mut count) = (T::zero(), 0usize);
            for t in trimmed {
                let v = t[i];
                if (positive && v > T::zero()) || (!positive && v < T::zero()) {
                    sum += v;
                    count += 1;
                }
            }
            if count == 0 {
                T::zero()
            } else {
                sum / T::from_usize(count).unwrap()
            }
        })
        .collect()
}

pub fn ties_kernel<T: Scalar>(base: &[T], deltas: &[&[T]], lambda: T, density: f64) -> Vec<T> {
    let trimmed: Vec<Vec<T>> = deltas.iter().map(|d| ties_trim(d, density)).collect();
    let refs: Vec<&[T]> = trimmed.iter().map(Vec::as_slice).collect();
    let merged = ties_elect_merge(&refs);
    base.iter().zip(&merged).map(|(&b, &m)| b + lambda * m).collect()
}

/// Drop each element with probability `drop_rate` and scale survivors by
/// exactly `1/(1 − drop_rate)`.
pub fn dare_process<T: Scalar>(delta: &[T], drop_rate: f64, seed: u64, stream: u64, name: &str) -> Vec<T> {
    let scale = T::one() / (T::one() - T::lit(drop_rate));
    let rng = KeyedStream::new(seed, stream, name);
    delta
        .iter()
        .enumerate()
        .map(|(i, &v)| if rng.uniform(i as u64) < drop_rate { T::zero() } else { v * scale })
        .collect()
}

pub fn dare_kernel<T: Scalar>(base: &[T], deltas: &[&[T]], lambda: T, drop_rate: f64, seed: u64, name: &str) -> Vec<T> {
    let processed: Vec<Vec<T>> = deltas
        .iter()
        .enumerate()
        .map(|(s, d)| dare_process(d, drop_rate, seed, s as u64, name))
        .collect();
    let refs: Vec<&[T]> = processed.iter().map(Vec::as_slice).collect();
    task_arithmetic_kernel(base, &refs, lambda)
}

pub(crate) fn check_drop_rate(drop_rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::Validation(format!("drop_rate must be in [0, 1), got {drop_rate}")));
    }
    Ok(())
}

pub(crate) fn check_density(density: f64) -> Result<()> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Validation(format!("density must be in (0, 1], got {density}")));
    }
    Ok(())
}

/// Apply a per-tensor kernel over task vectors sharing the base's eligible
/// space; tensors outside that space are copied from the base.
fn merge_task_vectors<T: Scalar, K>(base: &WeightMap, tvs: &[TaskVector<T>], kernel: K) -> Result<WeightMap>
where
    K: Fn(&str, &[T], &[&[T]]) -> Vec<T> + Sync,
{
    let first = tvs
        .first()
        .ok_or_else(|| Error::Precondition("at least one task vector is required".into()))?;
    let space = first.space();
    for tv in &tvs[1..] {
        tv.space().ensure_same(&space, "task vectors")?;
    }
    for (name, shape) in space.iter() {
        shape_check(name, shape, base.shape(name)?)?;
    }
    let out = produce(base, DtypePolicy::Keep, base.metadata().clone(), &Output::Memory, |name| {
        if !space.contains(name) {
            return base.read_raw(name);
        }
        let raw = base.read_raw(name)?;
        let b = raw.to_tensor::<T>()?;
        let deltas: Vec<&[T]> = tvs.iter().map(|tv| tv.get(name).unwrap().data()).collect();
        let merged = kernel(name, b.data(), &deltas);
        RawTensor::from_tensor(&Tensor::new(b.shape().to_vec(), merged)?, raw.dtype)
    })?;
    Ok(expect_memory(out))
}

/// Streaming form over fine-tuned checkpoints: deltas are formed per tensor
/// from the files, so only one chunk of tensors is resident at a time.
pub(crate) fn merge_fines_to<T: Scalar, K>(
    base: &WeightMap,
    fines: &[&WeightMap],
    filter: &NameFilter,
    policy: DtypePolicy,
    output: &Output,
    kernel: K,
) -> Result<(Option<WeightMap>, CompatReport)>
where
    K: Fn(&str, &[T], &[&[T]]) -> Vec<T> + Sync,
{
    let mut all = vec![base];
    all.extend_from_slice(fines);
    let compat = validate_compatibility(&all, filter)?;
    if compat.shared.is_empty() {
        return Err(Error::Consistency("no eligible tensors shared by the input models".into()));
    }
    let out = produce(base, policy, base.metadata().clone(), output, |name| {
        if !compat.is_shared(name) {
            return base.read_raw(name);
        }
        let raw = base.read_raw(name)?;
        let b = raw.to_tensor::<T>()?;
        let deltas: Vec<Tensor<T>> = fines.iter().map(|f| delta_tensor(f, base, name)).collect::<Result<_>>()?;
        let refs: Vec<&[T]> = deltas.iter().map(|d| d.data()).collect();
        let merged = kernel(name, b.data(), &refs);
        RawTensor::from_tensor(&Tensor::new(b.shape().to_vec(), merged)?, raw.dtype)
    })?;
    Ok((out, compat))
}

/// `θ_base + λ·Σ τ_i`.
pub fn task_arithmetic_merge<T: Scalar>(base: &WeightMap, tvs: &[TaskVector<T>], lambda: T) -> Result<WeightMap> {
    merge_task_vectors(base, tvs, |_, b, d| task_arithmetic_kernel(b, d, lambda))
}

pub fn ties_merge<T: Scalar>(base: &WeightMap, tvs: &[TaskVector<T>], lambda: T, density: f64) -> Result<WeightMap> {
    check_density(density)?;
    merge_task_vectors(base, tvs, |_, b, d| ties_kernel(b, d, lambda, density))
}

pub fn dare_merge<T: Scalar>(base: &WeightMap, tvs: &[TaskVector<T>], lambda: T, drop_rate: f64, seed: u64) -> Result<WeightMap> {
    check_drop_rate(drop_rate)?;
    merge_task_vectors(base, tvs, |name, b, d| dare_kernel(b, d, lambda, drop_rate, seed, name))
}

/// Elementwise `Σ w_i·θ_i` over models with identical tensor sets. Non-float
/// tensors must agree and are taken from the first model.
pub fn linear_merge<T: Scalar>(models: &[&WeightMap], weights: &[f64]) -> Result<WeightMap> {
    linear_merge_to::<T>(models, weights, DtypePolicy::Keep, &Output::Memory).map(expect_memory)
}

pub(crate) fn linear_merge_to<T: Scalar>(
    models: &[&WeightMap],
    weights: &[f64],
    policy: DtypePolicy,
    output: &Output,
) -> Result<Option<WeightMap>> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(Error::Validation(format!(
            "{} models but {} weights",
            models.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::Validation(format!("linear weights sum to {total}, expected 1")));
    }
    let first = models[0];
    for (i, m) in models.iter().enumerate().skip(1) {
        if !m.names().eq(first.names()) {
            return Err(Error::Consistency(format!("model {i} has a different tensor name set")));
        }
        for name in first.names() {
            shape_check(name, first.shape(name)?, m.shape(name)?)?;
        }
    }
    let w: Vec<T> = weights.iter().map(|&x| T::lit(x)).collect();
    produce(first, policy, first.metadata().clone(), output, |name| {
        let raw = first.read_raw(name)?;
        if !raw.dtype.is_float() {
            for m in &models[1..] {
                if m.read_raw(name)?.bytes != raw.bytes {
                    return Err(Error::Consistency(format!("non-float tensor {name} differs between models")));
                }
            }
            return Ok(raw);
        }
        let tensors: Vec<Tensor<T>> = models.iter().map(|m| m.read_tensor::<T>(name)).collect::<Result<_>>()?;
        let data = (0..raw.numel())
            .map(|i| {
                tensors
                    .iter()
                    .zip(&w)
                    .fold(T::zero(), |acc, (t, &wi)| acc + wi * t.data()[i])
            })
            .collect();
        RawTensor::from_tensor(&Tensor::new(raw.shape.clone(), data)?, raw.dtype)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Highest,
    Lowest,
}

/// `θ' = θ_base + τ ⊙ M` with `M` the Top-K (`Highest`) or Bottom-K
/// (`Lowest`) importance mask at ratio `p`.
pub fn additive_inject<T: Scalar>(
    base: &WeightMap,
    tv: &TaskVector<T>,
    imp: &ImportanceMap,
    p: f64,
    direction: Direction,
) -> Result<WeightMap> {
    additive_inject_scaled(base, tv, imp, p, direction, T::one())
}

/// [`additive_inject`] with the injected delta scaled by `scale`.
pub fn additive_inject_scaled<T: Scalar>(
    base: &WeightMap,
    tv: &TaskVector<T>,
    imp: &ImportanceMap,
    p: f64,
    direction: Direction,
    scale: T,
) -> Result<WeightMap> {
    let imp = imp.restrict(&tv.space())?;
    let mask = match direction {
        Direction::Highest => select_topk(&imp, p, Scope::Global)?,
        Direction::Lowest => select_bottomk(&imp, p, Scope::Global, ZeroPolicy::Include)?,
    };
    apply_masked_delta(base, tv, &mask, scale)
}
