//! Spectral diagnostics for gradient matrices: nuclear norm, the
//! Frobenius/nuclear norm sandwich, and the layer-wise mean absolute
//! difference (MAD) of nuclear norms.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use rayon::prelude::*;
use regex::Regex;
use serde::Serialize;

use crate::checkpoint::WeightMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative slack for the norm inequalities.
pub const BOUND_SLACK: f64 = 1e-9;
/// Singular values at or below `RANK_CUTOFF · σ_max` do not count toward rank.
pub const RANK_CUTOFF: f64 = 1e-10;
/// Common naming for attention projections in pretrained checkpoints.
pub const DEFAULT_LAYER_PATTERN: &str = "model.layers.{layer}.self_attn.{kind}_proj.weight";

fn to_matrix<T: Scalar>(m: &Tensor<T>) -> Result<DMatrix<f64>> {
    let &[rows, cols] = m.shape() else {
        return Err(Error::Validation(format!("expected a 2-D matrix, got shape {:?}", m.shape())));
    };
    if let Some(i) = m.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite matrix entry at flat index {i}")));
    }
    Ok(DMatrix::from_row_iterator(rows, cols, m.data().iter().map(|v| v.to_f64_exact())))
}

/// Singular values in descending order, computed in f64.
pub fn singular_values<T: Scalar>(m: &Tensor<T>) -> Result<Vec<f64>> {
    let mat = to_matrix(m)?;
    if mat.is_empty() {
        return Ok(Vec::new());
    }
    let mut sv: Vec<f64> = mat.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Sum of singular values.
pub fn nuclear_norm<T: Scalar>(m: &Tensor<T>) -> Result<f64> {
    Ok(singular_values(m)?.iter().sum())
}

pub fn frobenius_norm<T: Scalar>(m: &Tensor<T>) -> f64 {
    m.data().iter().map(|v| v.to_f64_exact().powi(2)).sum::<f64>().sqrt()
}

fn numerical_rank(sv: &[f64]) -> usize {
    let max = sv.first().copied().unwrap_or(0.0);
    sv.iter().filter(|&&s| s > RANK_CUTOFF * max).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormBounds {
    pub frobenius: f64,
    pub nuclear: f64,
    pub rank: usize,
    /// `‖G‖_F ≤ ‖G‖_*`
    pub lower_holds: bool,
    /// `‖G‖_* ≤ √r·‖G‖_F`
    pub upper_holds: bool,
}

pub fn verify_norm_bounds<T: Scalar>(m: &Tensor<T>) -> Result<NormBounds> {
    let sv = singular_values(m)?;
    Ok(bounds_from(frobenius_norm(m), &sv))
}

fn bounds_from(frobenius: f64, sv: &[f64]) -> NormBounds {
    let nuclear: f64 = sv.iter().sum();
    let rank = numerical_rank(sv);
    NormBounds {
        frobenius,
        nuclear,
        rank,
        lower_holds: frobenius <= nuclear * (1.0 + BOUND_SLACK),
        upper_holds: nuclear <= (rank as f64).sqrt() * frobenius * (1.0 + BOUND_SLACK),
    }
}

/// Mean absolute difference of consecutive values:
/// `(1/(N−1)) Σ |s[i+1] − s[i]|`.
pub fn mad(series: &[f64]) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::Precondition(format!(
            "MAD needs at least two values, got {}",
            series.len()
        )));
    }
    let total: f64 = series.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    Ok(total / (series.len() - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ProjectionKind {
    Q,
    K,
    V,
    O,
}

impl ProjectionKind {
    pub const ALL: [ProjectionKind; 4] = [ProjectionKind::Q, ProjectionKind::K, ProjectionKind::V, ProjectionKind::O];

    fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "q" => Some(Self::Q),
            "k" => Some(Self::K),
            "v" => Some(Self::V),
            "o" => Some(Self::O),
            _ => None,
        }
    }
}

impl fmt::Display for ProjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Tensor-name template with `{layer}` and `{kind}` placeholders and an
/// optional `{sample}` placeholder for per-sample dumps.
#[derive(Debug, Clone)]
pub struct LayerPattern {
    template: String,
    regex: Regex,
}

impl LayerPattern {
    pub fn new(template: &str) -> Result<Self> {
        if !template.contains("{layer}") || !template.contains("{kind}") {
            return Err(Error::Validation(format!(
                "layer pattern {template:?} needs both {{layer}} and {{kind}}"
            )));
        }
        let mut re = String::from("^");
        let mut rest = template;
        while let Some(start) = rest.find('{') {
            re.push_str(&regex::escape(&rest[..start]));
            let end = rest[start..]
                .find('}')
                .map(|e| start + e)
                .ok_or_else(|| Error::Validation(format!("unclosed placeholder in {template:?}")))?;
            match &rest[start + 1..end] {
                "layer" => re.push_str(r"(?P<layer>\d+)"),
                "kind" => re.push_str(r"(?P<kind>[qkvoQKVO])"),
                "sample" => re.push_str(r"(?P<sample>\d+)"),
                other => return Err(Error::Validation(format!("unknown placeholder {{{other}}} in layer pattern"))),
            }
            rest = &rest[end + 1..];
        }
        re.push_str(&regex::escape(rest));
        re.push('$');
        Ok(Self {
            template: template.to_string(),
            regex: Regex::new(&re).map_err(|e| Error::Validation(format!("layer pattern: {e}")))?,
        })
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    /// `(kind, layer, sample)` for a matching name.
    pub fn parse(&self, name: &str) -> Option<(ProjectionKind, usize, usize)> {
        let caps = self.regex.captures(name)?;
        let kind = ProjectionKind::parse(&caps["kind"])?;
        let layer = caps["layer"].parse().ok()?;
        let sample = match caps.name("sample") {
            Some(s) => s.as_str().parse().ok()?,
            None => 0,
        };
        Some((kind, layer, sample))
    }
}

impl Default for LayerPattern {
    fn default() -> Self {
        LayerPattern::new(DEFAULT_LAYER_PATTERN).expect("default pattern compiles")
    }
}

/// How per-sample gradient matrices are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// One entry per (kind, layer, sample).
    PerSample,
    /// Norms averaged over samples, one entry per (kind, layer).
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralEntry {
    pub kind: ProjectionKind,
    pub layer: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    pub nuclear: f64,
    pub frobenius: f64,
    pub rank: usize,
    pub lower_holds: bool,
    pub upper_holds: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub singular_values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MadEntry {
    pub kind: ProjectionKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    pub layers: usize,
    /// `None` when fewer than two layers are present.
    pub mad: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralReport {
    pub model_id: String,
    pub pattern: String,
    pub mode: SampleMode,
    /// Ordered by (kind, sample, layer).
    pub entries: Vec<SpectralEntry>,
    pub mad: Vec<MadEntry>,
    pub skipped: Vec<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct SpectralOptions {
    pub mode: SampleMode,
    pub keep_singular_values: bool,
}

pub fn layerwise_spectral_report(dump: &WeightMap, pattern: &LayerPattern, options: &SpectralOptions) -> Result<SpectralReport> {
    let mut matched = Vec::new();
    let mut skipped = Vec::new();
    for name in dump.names() {
        match pattern.parse(name) {
            Some((kind, layer, sample)) if dump.shape(name)?.len() == 2 => matched.push((kind, layer, sample, name)),
            _ => skipped.push(name.to_string()),
        }
    }
    if matched.is_empty() {
        return Err(Error::Validation(format!(
            "no projection matrices matched pattern {:?}",
            pattern.template()
        )));
    }
    matched.sort();

    let computed: Vec<(ProjectionKind, usize, usize, NormBounds, Vec<f64>)> = matched
        .par_iter()
        .map(|&(kind, layer, sample, name)| {
            let m: Tensor<f64> = dump.read_tensor(name)?;
            let sv = singular_values(&m)?;
            Ok((kind, layer, sample, bounds_from(frobenius_norm(&m), &sv), sv))
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::new();
    match options.mode {
        SampleMode::PerSample => {
            let mut rows: Vec<_> = computed.into_iter().collect();
            rows.sort_by_key(|r| (r.0, r.2, r.1));
            for (kind, layer, sample, b, sv) in rows {
                entries.push(SpectralEntry {
                    kind,
                    layer,
                    sample: Some(sample),
                    nuclear: b.nuclear,
                    frobenius: b.frobenius,
                    rank: b.rank,
                    lower_holds: b.lower_holds,
                    upper_holds: b.upper_holds,
                    singular_values: options.keep_singular_values.then_some(sv),
                });
            }
        }
        SampleMode::Mean => {
            let mut groups: BTreeMap<(ProjectionKind, usize), Vec<(NormBounds, Vec<f64>)>> = BTreeMap::new();
            for (kind, layer, _, b, sv) in computed {
                groups.entry((kind, layer)).or_default().push((b, sv));
            }
            for ((kind, layer), rows) in groups {
                let n = rows.len() as f64;
                let nuclear = rows.iter().map(|r| r.0.nuclear).sum::<f64>() / n;
                let frobenius = rows.iter().map(|r| r.0.frobenius).sum::<f64>() / n;
                let single = (rows.len() == 1).then(|| rows[0].clone());
                entries.push(SpectralEntry {
                    kind,
                    layer,
                    sample: None,
                    nuclear,
                    frobenius,
                    rank: rows.iter().map(|r| r.0.rank).max().unwrap_or(0),
                    lower_holds: rows.iter().all(|r| r.0.lower_holds),
                    upper_holds: rows.iter().all(|r| r.0.upper_holds),
                    singular_values: match single {
                        Some((_, sv)) if options.keep_singular_values => Some(sv),
                        _ => None,
                    },
                });
            }
        }
    }

    let mut series: BTreeMap<(ProjectionKind, Option<usize>), Vec<f64>> = BTreeMap::new();
    for e in &entries {
        series.entry((e.kind, e.sample)).or_default().push(e.nuclear);
    }
    let mut notes = Vec::new();
    let mad_entries = series
        .into_iter()
        .map(|((kind, sample), s)| {
            let value = mad(&s).ok();
            if value.is_none() {
                notes.push(format!("{kind}: only one layer, MAD undefined"));
            }
            MadEntry {
                kind,
                sample,
                layers: s.len(),
                mad: value,
            }
        })
        .collect();
    for kind in ProjectionKind::ALL {
        if !entries.iter().any(|e| e.kind == kind) {
            notes.push(format!("no {kind} projection matrices found"));
        }
    }

    Ok(SpectralReport {
        model_id: dump.metadata().get("model_id").cloned().unwrap_or_default(),
        pattern: pattern.template().to_string(),
        mode: options.mode,
        entries,
        mad: mad_entries,
        skipped,
        notes,
    })
}

impl SpectralReport {
    /// Flat CSV: `kind,layer,nuclear,frobenius,rank` (plus `sample` in
    /// per-sample mode).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let per_sample = self.mode == SampleMode::PerSample;
        let mut header = vec!["kind", "layer", "nuclear", "frobenius", "rank"];
        if per_sample {
            header.insert(2, "sample");
        }
        let to_err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
        w.write_record(&header).map_err(to_err)?;
        for e in &self.entries {
            let mut rec = vec![e.kind.to_string(), e.layer.to_string()];
            if per_sample {
                rec.push(e.sample.unwrap_or(0).to_string());
            }
            rec.extend([e.nuclear.to_string(), e.frobenius.to_string(), e.rank.to_string()]);
            w.write_record(&rec).map_err(to_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}
