//! Top-K / Bottom-K masks over the flattened parameter space, and mutual set
//! exclusion.
//!
//! Ranking is by importance score. Ties at the threshold go to the smaller
//! canonical position (tensor name ascending, then row-major flat index
//! ascending), so `|selected| == round(p·d)` exactly.
//!
//! Global selection never sorts the whole space. Scores are non-negative f32,
//! so their bit patterns order like their values. A 65 536-bin histogram over
//! the high 16 bits locates the bin holding the k-th key; a second histogram
//! over the low 16 bits of that bin pins down the exact threshold value and how
//! many of its copies are needed; a final pass marks every key below the
//! threshold plus the first copies of it in canonical order.

use std::collections::BTreeMap;

use bitvec::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Dtype, RawTensor, WeightMap};
use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::space::ParamSpace;

/// Bumped whenever the tie-break rule changes; recorded in exported masks.
pub const TIE_BREAK_VERSION: &str = "canonical-name-index-v1";

pub type Bits = BitVec<u64, Lsb0>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// One ranking over every eligible parameter.
    #[default]
    Global,
    /// Rank and select within each tensor separately.
    PerTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroPolicy {
    #[default]
    Include,
    /// Scores of exactly zero never enter a Bottom-K selection.
    #[serde(rename = "exclude_zero")]
    ExcludeExactZero,
}

/// Number of selected items for ratio `p` over `d` items, rounding half up.
pub fn target_count(p: f64, d: u64) -> u64 {
    ((p * d as f64) + 0.5).floor().min(d as f64) as u64
}

/// One bit per eligible parameter, per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMask {
    bits: BTreeMap<String, Bits>,
    shapes: ParamSpace,
    pub scope: Scope,
    pub ratio: f64,
}

impl SelectionMask {
    pub fn empty(space: &ParamSpace) -> Self {
        Self::filled(space, false)
    }

    pub fn full(space: &ParamSpace) -> Self {
        let mut m = Self::filled(space, true);
        m.ratio = 1.0;
        m
    }

    fn filled(space: &ParamSpace, value: bool) -> Self {
        Self {
            bits: space
                .iter()
                .map(|(n, s)| (n.to_string(), BitVec::repeat(value, s.iter().product())))
                .collect(),
            shapes: space.clone(),
            scope: Scope::Global,
            ratio: 0.0,
        }
    }

    /// Mask from (tensor, flat index) pairs.
    pub fn from_indices<'a>(space: &ParamSpace, indices: impl IntoIterator<Item = (&'a str, usize)>) -> Result<Self> {
        let mut m = Self::empty(space);
        for (name, i) in indices {
            let bits = m
                .bits
                .get_mut(name)
                .ok_or_else(|| Error::Consistency(format!("tensor {name} is not in the parameter space")))?;
            if i >= bits.len() {
                return Err(Error::Consistency(format!("index {i} out of range for {name}")));
            }
            bits.set(i, true);
        }
        Ok(m)
    }

    pub fn space(&self) -> &ParamSpace {
        &self.shapes
    }

    pub fn tensor(&self, name: &str) -> Option<&BitSlice<u64, Lsb0>> {
        self.bits.get(name).map(|b| b.as_bitslice())
    }

    pub fn contains(&self, name: &str, index: usize) -> bool {
        self.bits.get(name).and_then(|b| b.get(index).map(|b| *b)).unwrap_or(false)
    }

    /// Total selected count.
    pub fn count(&self) -> u64 {
        self.bits.values().map(|b| b.count_ones() as u64).sum()
    }

    pub fn tensor_counts(&self) -> BTreeMap<String, u64> {
        self.bits.iter().map(|(n, b)| (n.clone(), b.count_ones() as u64)).collect()
    }

    /// Selected (tensor, flat index) pairs in canonical order.
    pub fn indices(&self) -> Vec<(String, usize)> {
        self.bits
            .iter()
            .flat_map(|(n, b)| b.iter_ones().map(move |i| (n.clone(), i)))
            .collect()
    }

    fn ensure_same_space(&self, other: &SelectionMask) -> Result<()> {
        self.shapes.ensure_same(&other.shapes, "mask")
    }

    fn zip_with(&self, other: &SelectionMask, f: impl Fn(&Bits, &Bits) -> Bits) -> Result<SelectionMask> {
        self.ensure_same_space(other)?;
        Ok(SelectionMask {
            bits: self.bits.iter().map(|(n, a)| (n.clone(), f(a, &other.bits[n]))).collect(),
            shapes: self.shapes.clone(),
            scope: self.scope,
            ratio: self.ratio,
        })
    }

    pub fn intersection(&self, other: &SelectionMask) -> Result<SelectionMask> {
        self.zip_with(other, |a, b| a.clone() & b)
    }

    /// `self \ other`.
    pub fn difference(&self, other: &SelectionMask) -> Result<SelectionMask> {
        self.zip_with(other, |a, b| a.clone() & !b.clone())
    }

    pub fn union(&self, other: &SelectionMask) -> Result<SelectionMask> {
        self.zip_with(other, |a, b| a.clone() | b)
    }

    pub fn complement(&self) -> SelectionMask {
        SelectionMask {
            bits: self.bits.iter().map(|(n, b)| (n.clone(), !b.clone())).collect(),
            shapes: self.shapes.clone(),
            scope: self.scope,
            ratio: 1.0 - self.ratio,
        }
    }

    pub fn is_subset(&self, other: &SelectionMask) -> Result<bool> {
        Ok(self.difference(other)?.count() == 0)
    }

    pub fn is_disjoint(&self, other: &SelectionMask) -> Result<bool> {
        Ok(self.intersection(other)?.count() == 0)
    }

    /// Export as U8 tensors of 0/1 shaped like the model.
    pub fn to_weight_map(&self, source_importance: &str) -> WeightMap {
        let mut map = WeightMap::new();
        for (name, shape) in self.shapes.iter() {
            let bytes: Vec<u8> = self.bits[name].iter().map(|b| u8::from(*b)).collect();
            map.insert_raw(name, RawTensor::from_bytes(Dtype::U8, shape.to_vec(), bytes).expect("one byte per bit"));
        }
        let meta = map.metadata_mut();
        meta.insert("ratio".into(), self.ratio.to_string());
        meta.insert(
            "scope".into(),
            match self.scope {
                Scope::Global => "global",
                Scope::PerTensor => "per_tensor",
            }
            .into(),
        );
        meta.insert("tie_break".into(), TIE_BREAK_VERSION.into());
        meta.insert("source_importance".into(), source_importance.into());
        map
    }

    /// Read back an exported mask.
    pub fn from_weight_map(map: &WeightMap) -> Result<SelectionMask> {
        let mut bits = BTreeMap::new();
        let mut shapes = Vec::new();
        for name in map.names() {
            let raw = map.read_raw(name)?;
            if raw.dtype != Dtype::U8 {
                return Err(Error::Validation(format!("mask tensor {name} must be U8")));
            }
            let mut b = Bits::with_capacity(raw.bytes.len());
            for (i, &v) in raw.bytes.iter().enumerate() {
                match v {
                    0 => b.push(false),
                    1 => b.push(true),
                    _ => return Err(Error::Validation(format!("mask value {v} at {name}[{i}] is not 0/1"))),
                }
            }
            bits.insert(name.to_string(), b);
            shapes.push((name.to_string(), raw.shape));
        }
        let meta = map.metadata();
        Ok(SelectionMask {
            bits,
            shapes: ParamSpace::new(shapes),
            scope: match meta.get("scope").map(String::as_str) {
                Some("per_tensor") => Scope::PerTensor,
                _ => Scope::Global,
            },
            ratio: meta.get("ratio").and_then(|r| r.parse().ok()).unwrap_or(0.0),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Order {
    Largest,
    Smallest,
}

/// Ordering key: smaller key means selected first.
#[inline]
fn order_key(score: f32, order: Order) -> u32 {
    match order {
        Order::Smallest => score.to_bits(),
        Order::Largest => !score.to_bits(),
    }
}

const BINS: usize = 1 << 16;

fn histogram<F>(tensors: &[&[f32]], bin_of: F) -> Vec<u64>
where
    F: Fn(f32) -> Option<usize> + Sync,
{
    tensors
        .par_iter()
        .map(|scores| {
            let mut h = vec![0u64; BINS];
            for &s in scores.iter() {
                if let Some(b) = bin_of(s) {
                    h[b] += 1;
                }
            }
            h
        })
        .reduce(
            || vec![0u64; BINS],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        )
}

/// First bin at which the running count reaches `rank + 1`, and the count
/// strictly before it.
fn locate(hist: &[u64], rank: u64) -> (usize, u64) {
    let mut before = 0u64;
    for (bin, &c) in hist.iter().enumerate() {
        if before + c > rank {
            return (bin, before);
        }
        before += c;
    }
    unreachable!("rank {rank} beyond histogram total {before}")
}

/// Exact k-selection over `tensors` (canonical order), choosing the `k`
/// smallest order keys among eligible scores, ties by canonical position.
fn select_exact(tensors: &[&[f32]], k: u64, order: Order, eligible: impl Fn(f32) -> bool + Sync) -> Vec<Bits> {
    let pool: u64 = tensors
        .par_iter()
        .map(|t| t.iter().filter(|&&s| eligible(s)).count() as u64)
        .sum();
    let k = k.min(pool);
    if k == 0 {
        return tensors.iter().map(|t| BitVec::repeat(false, t.len())).collect();
    }
    if k == pool {
        return tensors.iter().map(|t| t.iter().map(|&s| eligible(s)).collect()).collect();
    }

    let key = |s: f32| order_key(s, order);
    let high = histogram(tensors, |s| eligible(s).then(|| (key(s) >> 16) as usize));
    let (high_bin, before_high) = locate(&high, k - 1);
    let low = histogram(tensors, |s| {
        let kk = key(s);
        (eligible(s) && (kk >> 16) as usize == high_bin).then_some((kk & 0xFFFF) as usize)
    });
    let (low_bin, before_low) = locate(&low, k - 1 - before_high);
    let threshold = ((high_bin as u32) << 16) | low_bin as u32;
    let mut remaining_ties = k - before_high - before_low;

    // Quotas of threshold-equal keys per tensor, handed out in canonical order.
    let tie_counts: Vec<u64> = tensors
        .par_iter()
        .map(|t| t.iter().filter(|&&s| eligible(s) && key(s) == threshold).count() as u64)
        .collect();
    let quotas: Vec<u64> = tie_counts
        .iter()
        .map(|&c| {
            let q = c.min(remaining_ties);
            remaining_ties -= q;
            q
        })
        .collect();

    tensors
        .par_iter()
        .zip(quotas.par_iter())
        .map(|(t, &quota)| {
            let mut left = quota;
            t.iter()
                .map(|&s| {
                    if !eligible(s) {
                        return false;
                    }
                    let kk = key(s);
                    if kk < threshold {
                        true
                    } else if kk == threshold && left > 0 {
                        left -= 1;
                        true
                    } else {
                        false
                    }
                })
                .collect()
        })
        .collect()
}

fn select(imp: &ImportanceMap, p: f64, scope: Scope, order: Order, zero_policy: ZeroPolicy) -> Result<SelectionMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Precondition(format!("selection ratio {p} outside [0, 1]")));
    }
    let space = imp.space();
    let names: Vec<&str> = space.names().collect();
    let tensors: Vec<&[f32]> = names.iter().map(|n| imp.get(n).unwrap().data()).collect();
    let skip_zero = order == Order::Smallest && zero_policy == ZeroPolicy::ExcludeExactZero;
    let eligible = move |s: f32| !(skip_zero && s == 0.0);

    let bits: Vec<Bits> = match scope {
        Scope::Global => {
            let k = target_count(p, space.numel());
            select_exact(&tensors, k, order, eligible)
        }
        Scope::PerTensor => tensors
            .iter()
            .map(|t| {
                let k = target_count(p, t.len() as u64);
                select_exact(std::slice::from_ref(t), k, order, eligible).pop().unwrap()
            })
            .collect(),
    };
    Ok(SelectionMask {
        bits: names.iter().map(|n| n.to_string()).zip(bits).collect(),
        shapes: space,
        scope,
        ratio: p,
    })
}

/// The `round(p·d)` highest-importance parameters.
pub fn select_topk(imp: &ImportanceMap, p: f64, scope: Scope) -> Result<SelectionMask> {
    select(imp, p, scope, Order::Largest, ZeroPolicy::Include)
}

/// The `round(p·d)` lowest-importance parameters. Under
/// [`ZeroPolicy::ExcludeExactZero`] zero scores are skipped and the count is
/// capped at the remaining pool.
pub fn select_bottomk(imp: &ImportanceMap, p: f64, scope: Scope, zero_policy: ZeroPolicy) -> Result<SelectionMask> {
    select(imp, p, scope, Order::Smallest, zero_policy)
}

/// Mutual exclusion: `(a \ b, b \ a)`.
pub fn exclude(a: &SelectionMask, b: &SelectionMask) -> Result<(SelectionMask, SelectionMask)> {
    Ok((a.difference(b)?, b.difference(a)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskStats {
    pub count: u64,
    pub eligible: u64,
    pub density: f64,
    pub per_tensor: BTreeMap<String, u64>,
}

pub fn mask_stats(mask: &SelectionMask) -> MaskStats {
    let count = mask.count();
    let eligible = mask.space().numel();
    MaskStats {
        count,
        eligible,
        density: if eligible == 0 { 0.0 } else { count as f64 / eligible as f64 },
        per_tensor: mask.tensor_counts(),
    }
}

/// `|a ∩ b|`.
pub fn overlap_count(a: &SelectionMask, b: &SelectionMask) -> Result<u64> {
    Ok(a.intersection(b)?.count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::Provenance;
    use crate::tensor::Tensor;

    fn imp(entries: &[(&str, &[f32])]) -> ImportanceMap {
        ImportanceMap::new(
            entries.iter().map(|(n, v)| (n.to_string(), Tensor::from_vec(v.to_vec()))).collect(),
            Provenance::default(),
        )
        .unwrap()
    }

    fn picked(m: &SelectionMask) -> Vec<(String, usize)> {
        m.indices()
    }

    fn idx(pairs: &[(&str, usize)]) -> Vec<(String, usize)> {
        pairs.iter().map(|(n, i)| (n.to_string(), *i)).collect()
    }

    #[test]
    fn topk_global_example() {
        let m = select_topk(&imp(&[("a", &[0.9, 0.1]), ("b", &[0.5, 0.3])]), 0.5, Scope::Global).unwrap();
        assert_eq!(picked(&m), idx(&[("a", 0), ("b", 0)]));
    }

    #[test]
    fn topk_full_ratio_selects_everything() {
        let i = imp(&[("a", &[0.9, 0.1]), ("b", &[0.5, 0.3])]);
        assert_eq!(select_topk(&i, 1.0, Scope::Global).unwrap().count(), 4);
    }

    #[test]
    fn topk_ties_break_by_canonical_order() {
        let m = select_topk(&imp(&[("a", &[0.5, 0.5, 0.5, 0.1])]), 0.5, Scope::Global).unwrap();
        assert_eq!(picked(&m), idx(&[("a", 0), ("a", 1)]));
    }

    #[test]
    fn bottomk_global_example() {
        let m = select_bottomk(&imp(&[("a", &[0.9, 0.1]), ("b", &[0.5, 0.3])]), 0.25, Scope::Global, ZeroPolicy::Include).unwrap();
        assert_eq!(picked(&m), idx(&[("a", 1)]));
    }

    #[test]
    fn bottomk_zero_ratio_is_empty() {
        let m = select_bottomk(&imp(&[("a", &[0.9, 0.1])]), 0.0, Scope::Global, ZeroPolicy::Include).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn bottomk_exclude_zero_skips_exact_zero() {
        let i = imp(&[("a", &[0.0, 0.2, 0.3, 0.4])]);
        let m = select_bottomk(&i, 0.25, Scope::Global, ZeroPolicy::ExcludeExactZero).unwrap();
        assert_eq!(picked(&m), idx(&[("a", 1)]));
        let m = select_bottomk(&i, 0.25, Scope::Global, ZeroPolicy::Include).unwrap();
        assert_eq!(picked(&m), idx(&[("a", 0)]));
        // Cap at pool size.
        let m = select_bottomk(&i, 1.0, Scope::Global, ZeroPolicy::ExcludeExactZero).unwrap();
        assert_eq!(m.count(), 3);
    }

    #[test]
    fn per_tensor_scope_rounds_each_tensor() {
        let i = imp(&[("a", &[0.9, 0.1, 0.2, 0.3]), ("b", &[0.01, 0.02])]);
        let m = select_topk(&i, 0.5, Scope::PerTensor).unwrap();
        assert_eq!(picked(&m), idx(&[("a", 0), ("a", 3), ("b", 1)]));
        let g = select_topk(&i, 0.5, Scope::Global).unwrap();
        assert_eq!(picked(&g), idx(&[("a", 0), ("a", 2), ("a", 3)]));
    }

    #[test]
    fn ratio_out_of_range_is_precondition() {
        let i = imp(&[("a", &[0.9])]);
        assert_eq!(select_topk(&i, 1.5, Scope::Global).unwrap_err().category(), "precondition");
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(target_count(0.5, 3), 2);
        assert_eq!(target_count(0.25, 2), 1);
        assert_eq!(target_count(0.05, 10), 1);
        assert_eq!(target_count(0.04, 10), 0);
        assert_eq!(target_count(1.0, 7), 7);
    }

    #[test]
    fn exclusion_examples() {
        let space = ParamSpace::new([("a".to_string(), vec![4])]);
        let a = SelectionMask::from_indices(&space, [("a", 0), ("a", 1), ("a", 2)]).unwrap();
        let b = SelectionMask::from_indices(&space, [("a", 1), ("a", 2), ("a", 3)]).unwrap();
        let (x, y) = exclude(&a, &b).unwrap();
        assert_eq!(picked(&x), idx(&[("a", 0)]));
        assert_eq!(picked(&y), idx(&[("a", 3)]));
        let (x, y) = exclude(&a, &a).unwrap();
        assert_eq!((x.count(), y.count()), (0, 0));
        let c = SelectionMask::from_indices(&space, [("a", 3)]).unwrap();
        let d = SelectionMask::from_indices(&space, [("a", 0)]).unwrap();
        assert_eq!(exclude(&c, &d).unwrap(), (c.clone(), d.clone()));
    }

    #[test]
    fn exclusion_needs_matching_space() {
        let a = SelectionMask::empty(&ParamSpace::new([("a".to_string(), vec![4])]));
        let b = SelectionMask::empty(&ParamSpace::new([("a".to_string(), vec![5])]));
        assert_eq!(exclude(&a, &b).unwrap_err().category(), "consistency");
    }

    #[test]
    fn stats_for_full_and_empty() {
        let space = ParamSpace::new([("a".to_string(), vec![10])]);
        let s = mask_stats(&SelectionMask::full(&space));
        assert_eq!((s.count, s.density), (10, 1.0));
        let s = mask_stats(&SelectionMask::empty(&space));
        assert_eq!((s.count, s.density), (0, 0.0));
    }

    #[test]
    fn stats_match_examples() {
        let i = imp(&[("a", &[0.9, 0.1]), ("b", &[0.5, 0.3])]);
        let top = select_topk(&i, 0.5, Scope::Global).unwrap();
        let bottom = select_bottomk(&i, 0.5, Scope::Global, ZeroPolicy::Include).unwrap();
        let s = mask_stats(&top);
        assert_eq!(s.per_tensor, BTreeMap::from([("a".to_string(), 1), ("b".to_string(), 1)]));
        // top = {a0, b0}, bottom = {a1, b1}
        assert_eq!(overlap_count(&top, &bottom).unwrap(), 0);
    }

    #[test]
    fn export_round_trip() {
        let i = imp(&[("a", &[0.9, 0.1, 0.4]), ("b", &[0.5, 0.3])]);
        let m = select_topk(&i, 0.4, Scope::Global).unwrap();
        let back = SelectionMask::from_weight_map(&m.to_weight_map("imp-1")).unwrap();
        assert_eq!(back, m);
    }
}
