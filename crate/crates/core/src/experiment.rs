//! Desk-scale experiments on toy models: additive injection of a specialist's
//! most/least important parameters, and a merge-method comparison between two
//! specialists sharing a base.
//!
//! Two synthetic regression tasks read disjoint blocks of a shared input
//! vector (with a small leak on the other block), so fine-tuning on one task
//! moves mostly the first-layer columns of its own block. Parameters are
//! rounded to a dyadic grid after every training step, which keeps
//! `base + (fine − base)` exact in f64.

use std::fmt::Write as _;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{validate_compatibility, Dtype, NameFilter, WeightMap};
use crate::error::{Error, Result};
use crate::importance::{toy_importance, Activation, CalibrationSet, ImportanceMap, LossKind, Sample, ToyModel};
use crate::merge::{
    additive_inject_scaled, dare_merge, linear_merge, reason_any_merge, task_arithmetic_merge, ties_merge, Direction,
    MethodSpec, ReasonAnyInputs, INJECTION_GRID,
};
use crate::task_vector::{compute_task_vector, TaskVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    Linear,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// First input coordinate the task reads.
    pub block_start: usize,
    pub block_len: usize,
    /// Amplitude of the inputs outside the block.
    pub leak: f64,
    pub rule: TargetRule,
    pub train_samples: usize,
    pub eval_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyExperimentConfig {
    pub seed: u64,
    /// Layer widths from input to output.
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub init_scale: f64,
    pub task_a: TaskConfig,
    pub task_b: TaskConfig,
    /// Gradient steps on the union of both tasks, from random init.
    pub base_steps: usize,
    /// Gradient steps from the base on one task.
    pub finetune_steps: usize,
    pub learning_rate: f64,
    pub calibration_samples: usize,
    /// Parameters are multiples of `2^-quantum_bits`.
    pub quantum_bits: u32,
    pub injection_grid: Vec<f64>,
    /// Scale applied to the injected delta (1 = plain injection).
    pub injection_scale: f64,
    /// Merge grid; each entry is a recipe object without file paths.
    pub methods: Vec<Value>,
}

impl Default for ToyExperimentConfig {
    fn default() -> Self {
        let task = |block_start| TaskConfig {
            block_start,
            block_len: 4,
            leak: 0.05,
            rule: TargetRule::Tanh,
            train_samples: 64,
            eval_samples: 64,
        };
        Self {
            seed: 0,
            dims: vec![8, 6, 2],
            activations: vec![Activation::Tanh, Activation::Identity],
            init_scale: 0.5,
            task_a: task(0),
            task_b: task(4),
            base_steps: 30,
            finetune_steps: 150,
            learning_rate: 0.1,
            calibration_samples: crate::importance::DEFAULT_SAMPLE_CAP,
            quantum_bits: 20,
            injection_grid: INJECTION_GRID.to_vec(),
            injection_scale: 1.0,
            methods: default_methods(),
        }
    }
}

fn default_methods() -> Vec<Value> {
    vec![
        json!({"method": "reason-any"}),
        json!({"method": "reason-any", "p_t": 0.1, "p_r": 0.1}),
        json!({"method": "task-arithmetic"}),
        json!({"method": "task-arithmetic", "lambda_t": 1.0}),
        json!({"method": "ties"}),
        json!({"method": "dare"}),
        json!({"method": "linear"}),
    ]
}

impl ToyExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Validation(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.dims.len() < 2 || self.activations.len() != self.dims.len() - 1 || self.dims.contains(&0) {
            return bad(format!(
                "dims {:?} and activations {:?} do not describe a network",
                self.dims, self.activations
            ));
        }
        for (name, t) in [("task_a", &self.task_a), ("task_b", &self.task_b)] {
            if t.block_len == 0 || t.block_start + t.block_len > self.dims[0] {
                return bad(format!("{name} block does not fit in {} inputs", self.dims[0]));
            }
            if t.train_samples == 0 || t.eval_samples == 0 {
                return bad(format!("{name} needs training and evaluation samples"));
            }
            if !(t.leak.is_finite() && t.leak >= 0.0) {
                return bad(format!("{name}.leak must be finite and non-negative"));
            }
        }
        if self.injection_grid.is_empty() || self.methods.is_empty() {
            return bad("injection grid and method grid must be non-empty".into());
        }
        if let Some(p) = self.injection_grid.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return bad(format!("injection ratio {p} is outside [0, 1]"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if !self.injection_scale.is_finite() || !self.init_scale.is_finite() {
            return bad("scales must be finite".into());
        }
        if self.calibration_samples == 0 || self.quantum_bits > 40 {
            return bad("calibration_samples must be positive and quantum_bits at most 40".into());
        }
        for m in &self.methods {
            crate::merge::parse_method_entry(m)?;
        }
        Ok(())
    }
}

/// Training and evaluation data for one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Vec<Sample<f64>>,
    pub eval: Vec<Sample<f64>>,
}

impl TaskData {
    pub fn calibration(&self, cap: usize, id: &str) -> Result<CalibrationSet<f64>> {
        CalibrationSet::new(id, self.train.clone())?.truncated(cap)
    }
}

/// The trained base, both specialists and the task data.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub base: ToyModel<f64>,
    pub expert_a: ToyModel<f64>,
    pub expert_b: ToyModel<f64>,
    pub data_a: TaskData,
    pub data_b: TaskData,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn make_task(cfg: &ToyExperimentConfig, task: &TaskConfig, stream: u64) -> TaskData {
    let (n_in, n_out) = (cfg.dims[0], *cfg.dims.last().unwrap());
    let mut teacher_rng = rng(cfg.seed, stream);
    let teacher: Vec<f64> = (0..n_out * task.block_len)
        .map(|_| teacher_rng.random_range(-1.5..=1.5))
        .collect();
    let draw = |count: usize, r: &mut ChaCha8Rng| -> Vec<Sample<f64>> {
        (0..count)
            .map(|_| {
                let input: Vec<f64> = (0..n_in)
                    .map(|j| {
                        let u: f64 = r.random_range(-1.0..=1.0);
                        let inside = (task.block_start..task.block_start + task.block_len).contains(&j);
                        if inside {
                            u
                        } else {
                            task.leak * u
                        }
                    })
                    .collect();
                let block = &input[task.block_start..task.block_start + task.block_len];
                let target = (0..n_out)
                    .map(|o| {
                        let z: f64 = teacher[o * task.block_len..(o + 1) * task.block_len]
                            .iter()
                            .zip(block)
                            .map(|(w, x)| w * x)
                            .sum();
                        match task.rule {
                            TargetRule::Linear => z,
                            TargetRule::Tanh => z.tanh(),
                        }
                    })
                    .collect();
                Sample::regression(input, target)
            })
            .collect()
    };
    TaskData {
        train: draw(task.train_samples, &mut rng(cfg.seed, stream + 1)),
        eval: draw(task.eval_samples, &mut rng(cfg.seed, stream + 2)),
    }
}

fn quantize(model: &mut ToyModel<f64>, bits: u32) {
    let q = (2f64).powi(bits as i32);
    model.for_each_param_mut(|_, values| {
        for v in values {
            *v = (*v * q).round() / q;
        }
    });
}

/// Plain gradient descent with re-quantization after every step.
fn train(model: &mut ToyModel<f64>, samples: &[Sample<f64>], steps: usize, cfg: &ToyExperimentConfig, what: &str) -> Result<()> {
    for step in 0..steps {
        let grad = model.mean_gradient(samples)?;
        let lr = cfg.learning_rate;
        model.for_each_param_mut(|name, values| {
            for (v, g) in values.iter_mut().zip(grad[name].data()) {
                *v -= lr * g;
            }
        });
        quantize(model, cfg.quantum_bits);
        let loss = model.mean_loss(samples)?;
        if !loss.is_finite() {
            return Err(Error::Validation(format!("{what} training diverged at step {step}")));
        }
    }
    Ok(())
}

pub fn build_world(cfg: &ToyExperimentConfig) -> Result<ToyWorld> {
    cfg.validate()?;
    let data_a = make_task(cfg, &cfg.task_a, 10);
    let data_b = make_task(cfg, &cfg.task_b, 20);
    let mut base = ToyModel::random(
        &cfg.dims,
        &cfg.activations,
        LossKind::MeanSquaredError,
        cfg.init_scale,
        &mut rng(cfg.seed, 0),
    )?;
    quantize(&mut base, cfg.quantum_bits);
    let mixed: Vec<Sample<f64>> = data_a.train.iter().chain(&data_b.train).cloned().collect();
    train(&mut base, &mixed, cfg.base_steps, cfg, "base")?;
    let mut expert_a = base.clone();
    train(&mut expert_a, &data_a.train, cfg.finetune_steps, cfg, "task A specialist")?;
    let mut expert_b = base.clone();
    train(&mut expert_b, &data_b.train, cfg.finetune_steps, cfg, "task B specialist")?;
    Ok(ToyWorld {
        base,
        expert_a,
        expert_b,
        data_a,
        data_b,
    })
}

impl ToyWorld {
    pub fn loss_of(&self, map: &WeightMap, data: &TaskData) -> Result<f64> {
        ToyModel::from_weight_map(map, Some(&self.base))?.mean_loss(&data.eval)
    }

    pub fn maps(&self) -> Result<[WeightMap; 3]> {
        Ok([
            self.base.to_weight_map(Dtype::F64)?,
            self.expert_a.to_weight_map(Dtype::F64)?,
            self.expert_b.to_weight_map(Dtype::F64)?,
        ])
    }

    /// Importance of each specialist on its own task.
    pub fn importances(&self, cap: usize) -> Result<(ImportanceMap, ImportanceMap)> {
        let a = toy_importance(&self.expert_a, &self.data_a.calibration(cap, "task_a")?)?;
        let b = toy_importance(&self.expert_b, &self.data_b.calibration(cap, "task_b")?)?;
        Ok((a, b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdditiveRow {
    pub direction: Direction,
    pub p: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdditiveTable {
    pub base_loss: f64,
    pub specialist_loss: f64,
    pub injection_scale: f64,
    pub rows: Vec<AdditiveRow>,
}

/// Inject the task-A specialist's highest/lowest-importance deltas into the
/// base and evaluate on task A.
pub fn run_additive_experiment(cfg: &ToyExperimentConfig) -> Result<AdditiveTable> {
    let world = build_world(cfg)?;
    additive_on(&world, cfg)
}

pub fn additive_on(world: &ToyWorld, cfg: &ToyExperimentConfig) -> Result<AdditiveTable> {
    let [base, expert, _] = world.maps()?;
    let compat = validate_compatibility(&[&expert, &base], &NameFilter::default())?;
    let tv: TaskVector<f64> = compute_task_vector(&expert, &base, &compat)?;
    let imp = toy_importance(&world.expert_a, &world.data_a.calibration(cfg.calibration_samples, "task_a")?)?;
    let cells: Vec<(Direction, f64)> = [Direction::Highest, Direction::Lowest]
        .into_iter()
        .flat_map(|d| cfg.injection_grid.iter().map(move |&p| (d, p)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(direction, p)| {
            let merged = additive_inject_scaled(&base, &tv, &imp, p, direction, cfg.injection_scale)?;
            Ok(AdditiveRow {
                direction,
                p,
                loss: world.loss_of(&merged, &world.data_a)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdditiveTable {
        base_loss: world.loss_of(&base, &world.data_a)?,
        specialist_loss: world.loss_of(&expert, &world.data_a)?,
        injection_scale: cfg.injection_scale,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: String,
    pub task_a_loss: f64,
    pub task_b_loss: f64,
    /// Largest loss increase over the matching expert, across both tasks.
    pub max_degradation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub base_task_a_loss: f64,
    pub base_task_b_loss: f64,
    pub expert_a_loss: f64,
    pub expert_b_loss: f64,
    pub rows: Vec<ComparisonRow>,
}

/// Human-readable label: the method followed by its resolved settings.
fn method_label(entry: &Value) -> Result<String> {
    let recipe = crate::merge::parse_method_entry(entry)?;
    let mut label = recipe.method.as_str().to_string();
    let value = recipe.to_value();
    for (k, v) in value.as_object().unwrap() {
        let skip = [
            "method",
            "base",
            "task_model",
            "reasoning_model",
            "task_importance",
            "reasoning_importance",
            "output",
            "report_output",
            "include_patterns",
            "exclude_patterns",
            "dtype_policy",
        ];
        if !skip.contains(&k.as_str()) {
            let v = v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string());
            let _ = write!(label, " {k}={v}");
        }
    }
    Ok(label)
}

/// Merge the two specialists with one method entry.
pub fn merge_with(world: &ToyWorld, entry: &Value, calibration_samples: usize) -> Result<WeightMap> {
    let recipe = crate::merge::parse_method_entry(entry)?;
    let filter = NameFilter::new(&recipe.include_patterns, &recipe.exclude_patterns)?;
    let [base, a, b] = world.maps()?;
    let tvs = || -> Result<[TaskVector<f64>; 2]> {
        let compat = validate_compatibility(&[&base, &a, &b], &filter)?;
        Ok([compute_task_vector(&a, &base, &compat)?, compute_task_vector(&b, &base, &compat)?])
    };
    match &recipe.spec {
        MethodSpec::ReasonAny { params, .. } => {
            let (imp_a, imp_b) = world.importances(calibration_samples)?;
            let inputs = ReasonAnyInputs {
                base: &base,
                task: &a,
                reasoning: &b,
                task_importance: &imp_a,
                reasoning_importance: &imp_b,
            };
            Ok(reason_any_merge::<f64>(&inputs, params, &filter)?.0)
        }
        MethodSpec::Linear { weights, .. } => linear_merge::<f64>(&[&a, &b], weights),
        MethodSpec::Baseline {
            lambda,
            density,
            drop_rate,
            seed,
            ..
        } => {
            let tvs = tvs()?;
            match (density, drop_rate, seed) {
                (Some(d), _, _) => ties_merge(&base, &tvs, *lambda, *d),
                (_, Some(r), Some(s)) => dare_merge(&base, &tvs, *lambda, *r, *s),
                _ => task_arithmetic_merge(&base, &tvs, *lambda),
            }
        }
    }
}

pub fn run_merge_comparison(cfg: &ToyExperimentConfig) -> Result<ComparisonTable> {
    let world = build_world(cfg)?;
    comparison_on(&world, cfg)
}

pub fn comparison_on(world: &ToyWorld, cfg: &ToyExperimentConfig) -> Result<ComparisonTable> {
    let [base, a, b] = world.maps()?;
    let expert_a_loss = world.loss_of(&a, &world.data_a)?;
    let expert_b_loss = world.loss_of(&b, &world.data_b)?;
    let rows = cfg
        .methods
        .par_iter()
        .map(|entry| {
            let merged = merge_with(world, entry, cfg.calibration_samples)?;
            let task_a_loss = world.loss_of(&merged, &world.data_a)?;
            let task_b_loss = world.loss_of(&merged, &world.data_b)?;
            Ok(ComparisonRow {
                method: method_label(entry)?,
                task_a_loss,
                task_b_loss,
                max_degradation: (task_a_loss - expert_a_loss).max(task_b_loss - expert_b_loss),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonTable {
        base_task_a_loss: world.loss_of(&base, &world.data_a)?,
        base_task_b_loss: world.loss_of(&base, &world.data_b)?,
        expert_a_loss,
        expert_b_loss,
        rows,
    })
}

impl AdditiveTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("direction,p,loss\n");
        for r in &self.rows {
            let d = match r.direction {
                Direction::Highest => "highest",
                Direction::Lowest => "lowest",
            };
            let _ = writeln!(out, "{d},{:?},{:?}", r.p, r.loss);
        }
        let _ = writeln!(out, "base,,{:?}", self.base_loss);
        let _ = writeln!(out, "specialist,,{:?}", self.specialist_loss);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,task_a_loss,task_b_loss,max_degradation\n");
        let _ = writeln!(out, "base,{:?},{:?},", self.base_task_a_loss, self.base_task_b_loss);
        let _ = writeln!(out, "expert_a,{:?},,", self.expert_a_loss);
        let _ = writeln!(out, "expert_b,,{:?},", self.expert_b_loss);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "\"{}\",{:?},{:?},{:?}",
                r.method, r.task_a_loss, r.task_b_loss, r.max_degradation
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}
