//! JSON merge recipes: strict parsing, default resolution and execution.
//!
//! Relative paths are resolved against the directory holding the recipe.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::baselines::{
    check_density, check_drop_rate, dare_kernel, linear_merge_to, merge_fines_to, task_arithmetic_kernel, ties_kernel,
};
use super::pipeline::Output;
use super::reason_any::{filter_note, reason_any_merge_to, MergeReport, ReasonAnyInputs, ReasonAnyParams};
use super::{BASELINE_LAMBDA, DEFAULT_DENSITY, DEFAULT_DROP_RATE};
use crate::checkpoint::{DtypePolicy, NameFilter, WeightMap};
use crate::error::{Error, Result};
use crate::importance::{load_importance, toy_importance, CalibrationSet, ImportanceMap, ToyModel, DEFAULT_SAMPLE_CAP};
use crate::scalar::Scalar;
use crate::selection::{Scope, ZeroPolicy};

/// Every key a recipe may contain.
pub const RECIPE_KEYS: [&str; 21] = [
    "method",
    "base",
    "task_model",
    "reasoning_model",
    "task_importance",
    "reasoning_importance",
    "p_t",
    "p_r",
    "lambda_t",
    "lambda_r",
    "scope",
    "zero_policy",
    "include_patterns",
    "exclude_patterns",
    "dtype_policy",
    "seed",
    "density",
    "drop_rate",
    "weights",
    "output",
    "report_output",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ReasonAny,
    Linear,
    TaskArithmetic,
    Ties,
    Dare,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::ReasonAny => "reason-any",
            Method::Linear => "linear",
            Method::TaskArithmetic => "task-arithmetic",
            Method::Ties => "ties",
            Method::Dare => "dare",
        }
    }

    /// Keys the method accepts beyond `method`, `output`, `report_output`
    /// and `dtype_policy`.
    fn keys(self) -> &'static [&'static str] {
        const MODELS: [&str; 3] = ["base", "task_model", "reasoning_model"];
        match self {
            Method::ReasonAny => &[
                "base",
                "task_model",
                "reasoning_model",
                "task_importance",
                "reasoning_importance",
                "p_t",
                "p_r",
                "lambda_t",
                "lambda_r",
                "scope",
                "zero_policy",
                "include_patterns",
                "exclude_patterns",
            ],
            Method::Linear => &["task_model", "reasoning_model", "weights"],
            Method::TaskArithmetic => &[
                MODELS[0],
                MODELS[1],
                MODELS[2],
                "lambda_t",
                "lambda_r",
                "include_patterns",
                "exclude_patterns",
            ],
            Method::Ties => &[
                "base",
                "task_model",
                "reasoning_model",
                "lambda_t",
                "lambda_r",
                "include_patterns",
                "exclude_patterns",
                "density",
            ],
            Method::Dare => &[
                "base",
                "task_model",
                "reasoning_model",
                "lambda_t",
                "lambda_r",
                "include_patterns",
                "exclude_patterns",
                "drop_rate",
                "seed",
            ],
        }
    }
}

/// Where importance scores come from: a precomputed importance file, or the
/// toy gradient oracle run on a calibration set against the model itself.
#[derive(Debug, Clone, PartialEq)]
pub enum ImportanceSource {
    File(PathBuf),
    Toy { calibration: PathBuf, samples: usize },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawImportance {
    Path(PathBuf),
    Toy {
        calibration: PathBuf,
        samples: Option<usize>,
    },
}

#[derive(Deserialize)]
struct RawRecipe {
    #[allow(dead_code)]
    method: Method,
    base: Option<PathBuf>,
    task_model: Option<PathBuf>,
    reasoning_model: Option<PathBuf>,
    task_importance: Option<Value>,
    reasoning_importance: Option<Value>,
    p_t: Option<f64>,
    p_r: Option<f64>,
    lambda_t: Option<f64>,
    lambda_r: Option<f64>,
    scope: Option<Scope>,
    zero_policy: Option<ZeroPolicy>,
    include_patterns: Option<Vec<String>>,
    exclude_patterns: Option<Vec<String>>,
    dtype_policy: Option<DtypePolicy>,
    seed: Option<u64>,
    density: Option<f64>,
    drop_rate: Option<f64>,
    weights: Option<Vec<f64>>,
    output: Option<PathBuf>,
    report_output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MethodSpec {
    ReasonAny {
        base: PathBuf,
        task_model: PathBuf,
        reasoning_model: PathBuf,
        task_importance: ImportanceSource,
        reasoning_importance: ImportanceSource,
        params: ReasonAnyParams,
    },
    Linear {
        task_model: PathBuf,
        reasoning_model: PathBuf,
        weights: Vec<f64>,
    },
    /// Task arithmetic, TIES and DARE over the task and reasoning vectors.
    Baseline {
        base: PathBuf,
        task_model: PathBuf,
        reasoning_model: PathBuf,
        lambda: f64,
        density: Option<f64>,
        drop_rate: Option<f64>,
        seed: Option<u64>,
    },
}

/// A fully resolved recipe: every default is explicit.
#[derive(Debug, Clone, PartialEq)]
pub struct Recipe {
    pub method: Method,
    pub spec: MethodSpec,
    pub include_patterns: Vec<String>,
    pub exclude_patterns: Vec<String>,
    pub dtype_policy: DtypePolicy,
    pub output: PathBuf,
    pub report_output: Option<PathBuf>,
}

fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn required<T>(v: Option<T>, key: &str, method: Method) -> Result<T> {
    v.ok_or_else(|| validation(format!("recipe key {key:?} is required for method {}", method.as_str())))
}

fn resolve_path(dir: &Path, p: PathBuf) -> PathBuf {
    if p.is_relative() {
        dir.join(p)
    } else {
        p
    }
}

fn parse_importance(v: Value, key: &str, dir: &Path) -> Result<ImportanceSource> {
    let raw: RawImportance = serde_json::from_value(v).map_err(|e| {
        validation(format!(
            "{key} must be a path or {{\"calibration\": path, \"samples\": n}}: {e}"
        ))
    })?;
    Ok(match raw {
        RawImportance::Path(p) => ImportanceSource::File(resolve_path(dir, p)),
        RawImportance::Toy { calibration, samples } => {
            let samples = samples.unwrap_or(DEFAULT_SAMPLE_CAP);
            if samples == 0 {
                return Err(validation(format!("{key}.samples must be positive")));
            }
            ImportanceSource::Toy {
                calibration: resolve_path(dir, calibration),
                samples,
            }
        }
    })
}

impl Recipe {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file_with(path, Map::new())
    }

    /// Parse a recipe file after overlaying `overrides` on its top-level keys.
    pub fn from_file_with(path: impl AsRef<Path>, overrides: Map<String, Value>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::format("recipe", format!("{}: {e}", path.display())))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::format("recipe", "recipe must be a JSON object"))?;
        for (k, v) in overrides {
            obj.insert(k, v);
        }
        let dir = path.parent().unwrap_or(Path::new(""));
        Self::from_value(value, dir)
    }

    /// Parse a recipe object; relative paths resolve against `dir`.
    pub fn from_value(value: Value, dir: &Path) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::format("recipe", "recipe must be a JSON object"))?;
        for key in obj.keys() {
            if !RECIPE_KEYS.contains(&key.as_str()) {
                return Err(validation(format!("unknown recipe key {key:?}")));
            }
        }
        let method_value = obj.get("method").ok_or_else(|| validation("recipe key \"method\" is required"))?;
        let method: Method = serde_json::from_value(method_value.clone()).map_err(|_| {
            validation(format!(
                "unknown method {method_value}; expected reason-any, linear, task-arithmetic, ties or dare"
            ))
        })?;
        let allowed: BTreeSet<&str> = method
            .keys()
            .iter()
            .copied()
            .chain(["method", "output", "report_output", "dtype_policy"])
            .collect();
        for key in obj.keys() {
            if !allowed.contains(key.as_str()) {
                return Err(validation(format!(
                    "recipe key {key:?} does not apply to method {}",
                    method.as_str()
                )));
            }
        }
        let raw: RawRecipe =
            serde_json::from_value(value.clone()).map_err(|e| validation(format!("invalid recipe: {e}")))?;
        let path = |p: Option<PathBuf>, key: &str| required(p, key, method).map(|p| resolve_path(dir, p));

        let spec = match method {
            Method::ReasonAny => {
                let params = ReasonAnyParams {
                    p_t: raw.p_t.unwrap_or(super::DEFAULT_RATIO),
                    p_r: raw.p_r.unwrap_or(super::DEFAULT_RATIO),
                    lambda_t: raw.lambda_t.unwrap_or(super::DEFAULT_LAMBDA),
                    lambda_r: raw.lambda_r.unwrap_or(super::DEFAULT_LAMBDA),
                    scope: raw.scope.unwrap_or(Scope::Global),
                    zero_policy: raw.zero_policy.unwrap_or(ZeroPolicy::Include),
                };
                params.validate()?;
                MethodSpec::ReasonAny {
                    base: path(raw.base, "base")?,
                    task_model: path(raw.task_model, "task_model")?,
                    reasoning_model: path(raw.reasoning_model, "reasoning_model")?,
                    task_importance: parse_importance(
                        required(raw.task_importance, "task_importance", method)?,
                        "task_importance",
                        dir,
                    )?,
                    reasoning_importance: parse_importance(
                        required(raw.reasoning_importance, "reasoning_importance", method)?,
                        "reasoning_importance",
                        dir,
                    )?,
                    params,
                }
            }
            Method::Linear => {
                let weights = raw.weights.unwrap_or_else(|| vec![0.5, 0.5]);
                if weights.len() != 2 {
                    return Err(validation(format!(
                        "weights must have one entry per model (2), got {}",
                        weights.len()
                    )));
                }
                let total: f64 = weights.iter().sum();
                if !weights.iter().all(|w| w.is_finite()) || (total - 1.0).abs() > super::WEIGHT_SUM_TOLERANCE {
                    return Err(validation(format!("linear weights sum to {total}, expected 1")));
                }
                MethodSpec::Linear {
                    task_model: path(raw.task_model, "task_model")?,
                    reasoning_model: path(raw.reasoning_model, "reasoning_model")?,
                    weights,
                }
            }
            Method::TaskArithmetic | Method::Ties | Method::Dare => {
                let lambda = match (raw.lambda_t, raw.lambda_r) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(validation(format!(
                            "method {} uses a single lambda; lambda_t {a} and lambda_r {b} differ",
                            method.as_str()
                        )))
                    }
                    (Some(a), _) | (None, Some(a)) => a,
                    (None, None) => BASELINE_LAMBDA,
                };
                if !lambda.is_finite() {
                    return Err(validation(format!("lambda must be finite, got {lambda}")));
                }
                let density = (method == Method::Ties).then(|| raw.density.unwrap_or(DEFAULT_DENSITY));
                if let Some(d) = density {
                    check_density(d)?;
                }
                let drop_rate = (method == Method::Dare).then(|| raw.drop_rate.unwrap_or(DEFAULT_DROP_RATE));
                if let Some(r) = drop_rate {
                    check_drop_rate(r)?;
                }
                MethodSpec::Baseline {
                    base: path(raw.base, "base")?,
                    task_model: path(raw.task_model, "task_model")?,
                    reasoning_model: path(raw.reasoning_model, "reasoning_model")?,
                    lambda,
                    density,
                    drop_rate,
                    seed: (method == Method::Dare).then(|| raw.seed.unwrap_or(0)),
                }
            }
        };
        let include_patterns = raw.include_patterns.unwrap_or_default();
        let exclude_patterns = raw.exclude_patterns.unwrap_or_default();
        NameFilter::new(&include_patterns, &exclude_patterns)?;
        Ok(Recipe {
            method,
            spec,
            include_patterns,
            exclude_patterns,
            dtype_policy: raw.dtype_policy.unwrap_or(DtypePolicy::Keep),
            output: path(raw.output, "output")?,
            report_output: raw.report_output.map(|p| resolve_path(dir, p)),
        })
    }

    /// The resolved recipe as a recipe document (absolute paths, defaults
    /// explicit). Parsing it back yields the same recipe.
    pub fn to_value(&self) -> Value {
        let mut m = Map::new();
        m.insert("method".into(), json!(self.method.as_str()));
        let importance = |s: &ImportanceSource| match s {
            ImportanceSource::File(p) => json!(p),
            ImportanceSource::Toy { calibration, samples } => json!({"calibration": calibration, "samples": samples}),
        };
        match &self.spec {
            MethodSpec::ReasonAny {
                base,
                task_model,
                reasoning_model,
                task_importance,
                reasoning_importance,
                params,
            } => {
                m.insert("base".into(), json!(base));
                m.insert("task_model".into(), json!(task_model));
                m.insert("reasoning_model".into(), json!(reasoning_model));
                m.insert("task_importance".into(), importance(task_importance));
                m.insert("reasoning_importance".into(), importance(reasoning_importance));
                m.insert("p_t".into(), json!(params.p_t));
                m.insert("p_r".into(), json!(params.p_r));
                m.insert("lambda_t".into(), json!(params.lambda_t));
                m.insert("lambda_r".into(), json!(params.lambda_r));
                m.insert("scope".into(), json!(params.scope));
                m.insert("zero_policy".into(), json!(params.zero_policy));
            }
            MethodSpec::Linear {
                task_model,
                reasoning_model,
                weights,
            } => {
                m.insert("task_model".into(), json!(task_model));
                m.insert("reasoning_model".into(), json!(reasoning_model));
                m.insert("weights".into(), json!(weights));
            }
            MethodSpec::Baseline {
                base,
                task_model,
                reasoning_model,
                lambda,
                density,
                drop_rate,
                seed,
            } => {
                m.insert("base".into(), json!(base));
                m.insert("task_model".into(), json!(task_model));
                m.insert("reasoning_model".into(), json!(reasoning_model));
                m.insert("lambda_t".into(), json!(lambda));
                m.insert("lambda_r".into(), json!(lambda));
                if let Some(d) = density {
                    m.insert("density".into(), json!(d));
                }
                if let Some(r) = drop_rate {
                    m.insert("drop_rate".into(), json!(r));
                }
                if let Some(s) = seed {
                    m.insert("seed".into(), json!(s));
                }
            }
        }
        if self.method != Method::Linear {
            m.insert("include_patterns".into(), json!(self.include_patterns));
            m.insert("exclude_patterns".into(), json!(self.exclude_patterns));
        }
        m.insert("dtype_policy".into(), json!(self.dtype_policy));
        m.insert("output".into(), json!(self.output));
        if let Some(r) = &self.report_output {
            m.insert("report_output".into(), json!(r));
        }
        Value::Object(m)
    }
}

/// Parse a method entry: a recipe object without file paths. Used by
/// experiment configs, whose models live in memory.
pub(crate) fn parse_method_entry(entry: &Value) -> Result<Recipe> {
    let obj = entry
        .as_object()
        .ok_or_else(|| validation("method entry must be a JSON object"))?;
    const PATH_KEYS: [&str; 7] = [
        "base",
        "task_model",
        "reasoning_model",
        "task_importance",
        "reasoning_importance",
        "output",
        "report_output",
    ];
    if let Some(k) = obj.keys().find(|k| PATH_KEYS.contains(&k.as_str())) {
        return Err(validation(format!("method entry may not set {k:?}")));
    }
    let mut full = obj.clone();
    let method = obj.get("method").and_then(Value::as_str).unwrap_or_default();
    let wanted: &[&str] = match method {
        "reason-any" => &PATH_KEYS[..5],
        "linear" => &PATH_KEYS[1..3],
        _ => &PATH_KEYS[..3],
    };
    for k in wanted {
        full.insert((*k).into(), json!("."));
    }
    full.insert("output".into(), json!("."));
    Recipe::from_value(Value::Object(full), Path::new(""))
}

fn load_source(source: &ImportanceSource, model: &WeightMap, model_path: &Path) -> Result<ImportanceMap> {
    match source {
        ImportanceSource::File(p) => load_importance(p, model, None),
        ImportanceSource::Toy { calibration, samples } => {
            let toy = ToyModel::<f64>::from_weight_map(model, None)?;
            let calib = CalibrationSet::<f64>::from_json_file(calibration, *samples)?;
            let mut imp = toy_importance(&toy, &calib)?;
            imp.provenance.model_id = model_path.display().to_string();
            Ok(imp)
        }
    }
}

/// Whether any float tensor is stored as F64; those merges run in f64, the
/// rest in f32.
fn needs_f64(maps: &[&WeightMap]) -> bool {
    maps.iter()
        .any(|m| m.names().any(|n| m.dtype(n).map(|d| d == crate::checkpoint::Dtype::F64).unwrap_or(false)))
}

fn execute<T: Scalar>(recipe: &Recipe, models: &[&WeightMap], output: &Output) -> Result<MergeReport> {
    let filter = NameFilter::new(&recipe.include_patterns, &recipe.exclude_patterns)?;
    let start = Instant::now();
    let mut report = match &recipe.spec {
        MethodSpec::ReasonAny {
            task_model,
            reasoning_model,
            task_importance,
            reasoning_importance,
            params,
            ..
        } => {
            let imp_t = load_source(task_importance, models[1], task_model)?;
            let imp_r = load_source(reasoning_importance, models[2], reasoning_model)?;
            let inputs = ReasonAnyInputs {
                base: models[0],
                task: models[1],
                reasoning: models[2],
                task_importance: &imp_t,
                reasoning_importance: &imp_r,
            };
            reason_any_merge_to::<T>(&inputs, params, &filter, recipe.dtype_policy, output)?.1
        }
        MethodSpec::Linear { weights, .. } => {
            linear_merge_to::<T>(models, weights, recipe.dtype_policy, output)?;
            MergeReport {
                eligible_tensors: models[0].len(),
                eligible_param_count: models[0]
                    .names()
                    .filter(|n| models[0].dtype(n).map(|d| d.is_float()).unwrap_or(false))
                    .map(|n| models[0].numel(n).unwrap() as u64)
                    .sum(),
                ..MergeReport::default()
            }
        }
        MethodSpec::Baseline {
            lambda,
            density,
            drop_rate,
            seed,
            ..
        } => {
            let l = T::lit(*lambda);
            let fines = &models[1..];
            let (_, compat) = match recipe.method {
                Method::TaskArithmetic => merge_fines_to::<T, _>(models[0], fines, &filter, recipe.dtype_policy, output, |_, b, d| {
                    task_arithmetic_kernel(b, d, l)
                })?,
                Method::Ties => {
                    let density = density.expect("resolved");
                    merge_fines_to::<T, _>(models[0], fines, &filter, recipe.dtype_policy, output, |_, b, d| {
                        ties_kernel(b, d, l, density)
                    })?
                }
                Method::Dare => {
                    let (rate, seed) = (drop_rate.expect("resolved"), seed.expect("resolved"));
                    merge_fines_to::<T, _>(models[0], fines, &filter, recipe.dtype_policy, output, |name, b, d| {
                        dare_kernel(b, d, l, rate, seed, name)
                    })?
                }
                _ => unreachable!("baseline spec with non-baseline method"),
            };
            MergeReport {
                eligible_tensors: compat.shared.len(),
                eligible_param_count: compat.eligible_param_count,
                skipped: compat.skipped,
                ..MergeReport::default()
            }
        }
    };
    report.method = recipe.method.as_str().into();
    if recipe.method != Method::Linear {
        report.notes.push(filter_note(&recipe.include_patterns, &recipe.exclude_patterns));
    }
    report.elapsed_seconds = start.elapsed().as_secs_f64();
    report.recipe = Some(recipe.to_value());
    Ok(report)
}

/// Run a recipe: write the merged checkpoint and, if requested, the JSON
/// report. On failure nothing is left at either output path.
pub fn run_recipe(recipe: &Recipe) -> Result<MergeReport> {
    let open = |p: &PathBuf| WeightMap::open(p);
    let maps: Vec<WeightMap> = match &recipe.spec {
        MethodSpec::ReasonAny {
            base,
            task_model,
            reasoning_model,
            ..
        }
        | MethodSpec::Baseline {
            base,
            task_model,
            reasoning_model,
            ..
        } => vec![open(base)?, open(task_model)?, open(reasoning_model)?],
        MethodSpec::Linear {
            task_model,
            reasoning_model,
            ..
        } => vec![open(task_model)?, open(reasoning_model)?],
    };
    let refs: Vec<&WeightMap> = maps.iter().collect();
    let output = Output::File {
        path: recipe.output.clone(),
        strict_finite: true,
    };
    let result = if needs_f64(&refs) {
        execute::<f64>(recipe, &refs, &output)
    } else {
        execute::<f32>(recipe, &refs, &output)
    };
    let report = result?;
    if let Some(path) = &recipe.report_output {
        if let Err(e) = write_atomic(path, report.to_json().as_bytes()) {
            let _ = fs::remove_file(&recipe.output);
            return Err(e);
        }
    }
    Ok(report)
}

/// Write via a sibling temporary file and rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
}
