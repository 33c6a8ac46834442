use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Calibration samples taken per dataset unless configured otherwise.
pub const DEFAULT_SAMPLE_CAP: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub enum Target<T> {
    /// Regression target for mean-squared error.
    Values(Vec<T>),
    /// Class index for softmax cross-entropy.
    Class(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub input: Vec<T>,
    pub target: Target<T>,
}

impl<T: Scalar> Sample<T> {
    pub fn regression(input: Vec<T>, target: Vec<T>) -> Self {
        Self {
            input,
            target: Target::Values(target),
        }
    }

    pub fn class(input: Vec<T>, class: usize) -> Self {
        Self {
            input,
            target: Target::Class(class),
        }
    }
}

/// A fixed, non-empty sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet<T> {
    pub id: String,
    samples: Vec<Sample<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleJson {
    input: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationJson {
    id: String,
    samples: Vec<SampleJson>,
}

impl<T: Scalar> CalibrationSet<T> {
    pub fn new(id: impl Into<String>, samples: Vec<Sample<T>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation("calibration set is empty".into()));
        }
        Ok(Self { id: id.into(), samples })
    }

    pub fn samples(&self) -> &[Sample<T>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Keep only the first `cap` samples.
    pub fn truncated(mut self, cap: usize) -> Result<Self> {
        if cap == 0 {
            return Err(Error::Validation("sample cap must be at least 1".into()));
        }
        self.samples.truncate(cap);
        Ok(self)
    }

    /// Read `{"id": .., "samples": [{"input": [..], "target": [..] | "class": n}]}`
    /// keeping the first `cap` samples.
    pub fn from_json_file(path: impl AsRef<Path>, cap: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: CalibrationJson = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("calibration file {}: {e}", path.display())))?;
        let samples = raw
            .samples
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let input = s.input.into_iter().map(T::from_f64_rne).collect();
                let target = match (s.target, s.class) {
                    (Some(t), None) => Target::Values(t.into_iter().map(T::from_f64_rne).collect()),
                    (None, Some(c)) => Target::Class(c),
                    _ => {
                        return Err(Error::Validation(format!(
                            "calibration sample {i} needs exactly one of \"target\" or \"class\""
                        )))
                    }
                };
                Ok(Sample { input, target })
            })
            .collect::<Result<Vec<_>>>()?;
        CalibrationSet::new(raw.id, samples)?.truncated(cap)
    }

    pub fn to_json(&self) -> String {
        let raw = CalibrationJson {
            id: self.id.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| {
                    let input = s.input.iter().map(|v| v.to_f64_exact()).collect();
                    match &s.target {
                        Target::Values(t) => SampleJson {
                            input,
                            target: Some(t.iter().map(|v| v.to_f64_exact()).collect()),
                            class: None,
                        },
                        Target::Class(c) => SampleJson {
                            input,
                            target: None,
                            class: Some(*c),
                        },
                    }
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("calibration serializes")
    }
}
