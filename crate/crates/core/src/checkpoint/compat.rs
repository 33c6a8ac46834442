use std::collections::BTreeSet;

use glob::Pattern;
use serde::Serialize;

use super::WeightMap;
use crate::error::{Error, Result};

/// Include/exclude glob patterns over tensor names. A name passes when it
/// matches some include pattern (or there are none) and no exclude pattern.
#[derive(Debug, Clone, Default)]
pub struct NameFilter {
    include: Vec<Pattern>,
    exclude: Vec<Pattern>,
}

impl NameFilter {
    pub fn new<S: AsRef<str>>(include: &[S], exclude: &[S]) -> Result<Self> {
        let compile = |pats: &[S]| {
            pats.iter()
                .map(|p| {
                    Pattern::new(p.as_ref())
                        .map_err(|e| Error::Validation(format!("bad name pattern {:?}: {e}", p.as_ref())))
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            include: compile(include)?,
            exclude: compile(exclude)?,
        })
    }

    pub fn allows(&self, name: &str) -> bool {
        (self.include.is_empty() || self.include.iter().any(|p| p.matches(name)))
            && !self.exclude.iter().any(|p| p.matches(name))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum SkipReason {
    /// Absent from the listed inputs (indices into the map sequence).
    Missing { absent_in: Vec<usize> },
    ShapeMismatch { shapes: Vec<Vec<usize>> },
    /// Integer or boolean storage somewhere; copied from the base verbatim.
    NonFloat,
    Filtered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Skipped {
    pub name: String,
    #[serde(flatten)]
    pub reason: SkipReason,
}

/// Which tensors can take part in a merge.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CompatReport {
    /// Canonical order.
    pub shared: Vec<String>,
    pub skipped: Vec<Skipped>,
    /// Total scalar count over `shared`.
    pub eligible_param_count: u64,
}

impl CompatReport {
    pub fn is_shared(&self, name: &str) -> bool {
        self.shared.binary_search_by(|n| n.as_str().cmp(name)).is_ok()
    }
}

pub fn validate_compatibility(maps: &[&WeightMap], filter: &NameFilter) -> Result<CompatReport> {
    if maps.len() < 2 {
        return Err(Error::Precondition(format!(
            "compatibility needs at least two maps, got {}",
            maps.len()
        )));
    }
    let names: BTreeSet<&str> = maps.iter().flat_map(|m| m.names()).collect();
    let mut report = CompatReport::default();
    for name in names {
        let absent_in: Vec<usize> = (0..maps.len()).filter(|&i| !maps[i].contains(name)).collect();
        let reason = if !absent_in.is_empty() {
            Some(SkipReason::Missing { absent_in })
        } else if !filter.allows(name) {
            Some(SkipReason::Filtered)
        } else {
            let shapes: Vec<Vec<usize>> = maps.iter().map(|m| m.shape(name).unwrap().to_vec()).collect();
            if shapes.windows(2).any(|w| w[0] != w[1]) {
                Some(SkipReason::ShapeMismatch { shapes })
            } else if maps.iter().any(|m| !m.dtype(name).unwrap().is_float()) {
                Some(SkipReason::NonFloat)
            } else {
                None
            }
        };
        match reason {
            Some(reason) => report.skipped.push(Skipped {
                name: name.to_string(),
                reason,
            }),
            None => {
                report.eligible_param_count += maps[0].numel(name)? as u64;
                report.shared.push(name.to_string());
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{Dtype, RawTensor};
    use crate::tensor::Tensor;

    fn model(entries: &[(&str, Vec<usize>)]) -> WeightMap {
        let mut m = WeightMap::new();
        for (name, shape) in entries {
            m.insert_native(*name, &Tensor::<f32>::zeros(shape.clone()));
        }
        m
    }

    #[test]
    fn identical_maps_share_everything() {
        let a = model(&[("w", vec![2, 3]), ("b", vec![3])]);
        let r = validate_compatibility(&[&a, &a.clone()], &NameFilter::default()).unwrap();
        assert_eq!(r.shared, ["b", "w"]);
        assert!(r.skipped.is_empty());
        assert_eq!(r.eligible_param_count, 9);
    }

    #[test]
    fn shape_mismatch_is_skipped() {
        let a = model(&[("emb", vec![100, 8]), ("w", vec![2])]);
        let b = model(&[("emb", vec![101, 8]), ("w", vec![2])]);
        let r = validate_compatibility(&[&a, &b], &NameFilter::default()).unwrap();
        assert_eq!(r.shared, ["w"]);
        assert!(matches!(r.skipped[0].reason, SkipReason::ShapeMismatch { .. }));
        assert_eq!(r.skipped[0].name, "emb");
    }

    #[test]
    fn exclude_pattern_filters_bias() {
        let a = model(&[("l0.bias", vec![2]), ("l0.weight", vec![2, 2]), ("l1.bias", vec![2])]);
        let f = NameFilter::new::<&str>(&[], &["*.bias"]).unwrap();
        let r = validate_compatibility(&[&a, &a], &f).unwrap();
        assert_eq!(r.shared, ["l0.weight"]);
        assert!(r.skipped.iter().all(|s| s.reason == SkipReason::Filtered));
        assert_eq!(r.skipped.len(), 2);
    }

    #[test]
    fn integer_tensors_are_not_eligible() {
        let mut a = model(&[("w", vec![2])]);
        a.insert_raw("pos", RawTensor::from_bytes(Dtype::I32, vec![1], vec![0; 4]).unwrap());
        let r = validate_compatibility(&[&a, &a], &NameFilter::default()).unwrap();
        assert_eq!(r.skipped[0].reason, SkipReason::NonFloat);
    }

    #[test]
    fn missing_tensor_records_where() {
        let a = model(&[("w", vec![2]), ("x", vec![1])]);
        let b = model(&[("w", vec![2])]);
        let r = validate_compatibility(&[&a, &b], &NameFilter::default()).unwrap();
        assert_eq!(r.skipped[0].reason, SkipReason::Missing { absent_in: vec![1] });
    }

    #[test]
    fn single_map_is_rejected() {
        let a = model(&[("w", vec![2])]);
        assert!(validate_compatibility(&[&a], &NameFilter::default()).is_err());
    }
}
