//! One PASS/FAIL line per acceptance criterion, with wall time. Exits
//! nonzero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use gradmerge::checkpoint::{validate_compatibility, RawTensor, WriteOptions};
use gradmerge::experiment::{run_additive_experiment, ToyExperimentConfig};
use gradmerge::importance::{
    finite_diff_gradient, save_importance, Activation, ImportanceMap, LossKind, Provenance, Sample, ToyModel,
};
use gradmerge::merge::{
    dare_merge, dare_process, reason_any_masks, reason_any_merge, task_arithmetic_merge, ties_merge, Direction,
    ReasonAnyInputs, ReasonAnyParams,
};
use gradmerge::selection::{select_bottomk, select_topk};
use gradmerge::spectral::{mad, nuclear_norm, verify_norm_bounds};
use gradmerge::task_vector::compute_task_vector;
use gradmerge::{open_checkpoint, write_checkpoint, Dtype, NameFilter, Scope, TaskVector, Tensor, WeightMap, ZeroPolicy};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

struct Trio {
    base: WeightMap,
    task: WeightMap,
    reasoning: WeightMap,
    imp_t: ImportanceMap,
    imp_r: ImportanceMap,
}

fn trio<R: Rng>(rng: &mut R, max_len: usize, ties: bool) -> Trio {
    let (mut base, mut task, mut reasoning) = (WeightMap::new(), WeightMap::new(), WeightMap::new());
    let (mut it, mut ir) = (BTreeMap::new(), BTreeMap::new());
    for t in 0..rng.random_range(1..=3) {
        let len = rng.random_range(1..=max_len);
        let name = format!("layer{t}.w");
        let b: Vec<f32> = (0..len).map(|_| if rng.random_bool(0.05) { -0.0 } else { rng.random_range(-2.0f32..2.0) }).collect();
        let f = |rng: &mut R| b.iter().map(|&x| x + rng.random_range(-0.1f32..0.1)).collect::<Vec<_>>();
        let (tv, rv) = (f(rng), f(rng));
        base.insert_native(name.clone(), &Tensor::from_vec(b.clone()));
        task.insert_native(name.clone(), &Tensor::from_vec(tv));
        reasoning.insert_native(name.clone(), &Tensor::from_vec(rv));
        let score = |rng: &mut R| -> Vec<f32> {
            (0..len)
                .map(|_| if ties { [0.0f32, 1.0, 2.0][rng.random_range(0..3)] } else { rng.random_range(0.0f32..1.0) })
                .collect()
        };
        it.insert(name.clone(), Tensor::from_vec(score(rng)));
        ir.insert(name, Tensor::from_vec(score(rng)));
    }
    Trio {
        base,
        task,
        reasoning,
        imp_t: ImportanceMap::new(it, Provenance::default()).unwrap(),
        imp_r: ImportanceMap::new(ir, Provenance::default()).unwrap(),
    }
}

fn merge(t: &Trio, params: &ReasonAnyParams) -> (WeightMap, gradmerge::merge::MergeReport) {
    let inputs = ReasonAnyInputs {
        base: &t.base,
        task: &t.task,
        reasoning: &t.reasoning,
        task_importance: &t.imp_t,
        reasoning_importance: &t.imp_r,
    };
    reason_any_merge::<f32>(&inputs, params, &NameFilter::default()).unwrap()
}

fn bits(m: &WeightMap, name: &str) -> Vec<u32> {
    m.read_f32(name).unwrap().data().iter().map(|v| v.to_bits()).collect()
}

fn random_params<R: Rng>(rng: &mut R) -> ReasonAnyParams {
    ReasonAnyParams {
        p_t: rng.random_range(0.0..=1.0),
        p_r: rng.random_range(0.0..=1.0),
        lambda_t: 1.0,
        lambda_r: 1.0,
        scope: if rng.random_bool(0.5) { Scope::Global } else { Scope::PerTensor },
        zero_policy: if rng.random_bool(0.5) { ZeroPolicy::Include } else { ZeroPolicy::ExcludeExactZero },
    }
}

fn disjointness() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    for i in 0..1000 {
        let t = trio(&mut rng, 400, i % 3 == 0);
        let params = random_params(&mut rng);
        let masks = reason_any_masks(&t.imp_t, &t.imp_r, &params).unwrap();
        assert!(masks.m_t.intersection(&masks.m_r).unwrap().count() == 0, "instance {i}");
        let c = merge(&t, &params).1.masks.unwrap();
        assert_eq!(c.t_t + c.t_r + 2 * c.overlap, c.n_t + c.n_r, "instance {i}");
    }
    "1000 instances".into()
}

fn reconstruction() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    for _ in 0..100 {
        let ties = rng.random_bool(0.5);
        let t = trio(&mut rng, 500, ties);
        let zero = ReasonAnyParams { lambda_t: 0.0, lambda_r: 0.0, ..random_params(&mut rng) };
        let full = ReasonAnyParams { p_t: 1.0, p_r: 1.0, zero_policy: ZeroPolicy::Include, ..random_params(&mut rng) };
        let reason_only = ReasonAnyParams { p_t: 0.0, p_r: 1.0, ..Default::default() };
        let (z, f, r) = (merge(&t, &zero).0, merge(&t, &full).0, merge(&t, &reason_only).0);
        for name in t.base.names() {
            assert_eq!(bits(&z, name), bits(&t.base, name));
            assert_eq!(bits(&f, name), bits(&t.base, name));
            let (b, fine) = (t.base.read_f32(name).unwrap(), t.reasoning.read_f32(name).unwrap());
            let want: Vec<u32> = b.data().iter().zip(fine.data()).map(|(&b, &f)| (b + (f - b)).to_bits()).collect();
            assert_eq!(bits(&r, name), want);
        }
    }
    "100 instances x 3 identities, bitwise".into()
}

fn selection_exactness() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let mut total = 0usize;
    for i in 0..500 {
        let max = if i % 50 == 0 { 100_000 } else { 4000 };
        let imp = common::random_importance(&mut rng, max, i % 2 == 0);
        let p = if i % 5 == 0 { [0.0, 0.01, 0.05, 0.5, 1.0][i / 5 % 5] } else { rng.random_range(0.0..=1.0) };
        let d = imp.space().numel();
        total += d as usize;
        for scope in [Scope::Global, Scope::PerTensor] {
            let per = scope == Scope::PerTensor;
            let mut top = select_topk(&imp, p, scope).unwrap().indices();
            top.sort();
            assert_eq!(top, common::sort_select(&imp, p, per, true, false), "instance {i}");
            let mut bottom = select_bottomk(&imp, p, scope, ZeroPolicy::Include).unwrap().indices();
            bottom.sort();
            assert_eq!(bottom, common::sort_select(&imp, p, per, false, false), "instance {i}");
            if scope == Scope::Global {
                let k = (p * d as f64 + 0.5).floor() as usize;
                assert_eq!((top.len(), bottom.len()), (k, k), "instance {i}");
            }
        }
    }
    format!("500 instances, {total} scores")
}

fn constructed_union() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    for _ in 0..200 {
        let len = rng.random_range(8..2000);
        let u = common::union_instance(&mut rng, len);
        let inputs = ReasonAnyInputs {
            base: &u.base,
            task: &u.task,
            reasoning: &u.reasoning,
            task_importance: &u.task_importance,
            reasoning_importance: &u.reasoning_importance,
        };
        let params = ReasonAnyParams { p_t: u.p_t, p_r: u.p_r, ..Default::default() };
        let out = reason_any_merge::<f32>(&inputs, &params, &NameFilter::default()).unwrap().0;
        let want: Vec<u32> = u.expected.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits(&out, "w"), want);
    }
    "200 constructions, bitwise".into()
}

fn gradient_oracle() -> String {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = rng.random_range(1..=3);
        let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=5)).collect();
        let acts: Vec<Activation> = (0..depth)
            .map(|i| if i + 1 == depth || rng.random_bool(0.3) { Activation::Identity } else { Activation::Tanh })
            .collect();
        let ce = rng.random_bool(0.5) && dims[depth] > 1;
        let loss = if ce { LossKind::CrossEntropy } else { LossKind::MeanSquaredError };
        let model = ToyModel::random(&dims, &acts, loss, 0.8, &mut rng).unwrap();
        let input: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sample = if ce {
            Sample::class(input, rng.random_range(0..dims[depth]))
        } else {
            Sample::regression(input, (0..dims[depth]).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let exact = model.backward(&sample).unwrap();
        let fd = finite_diff_gradient(&model, &sample, 1e-5).unwrap();
        for (name, t) in &exact {
            for (a, b) in t.data().iter().zip(fd[name].data()) {
                let scale = a.abs().max(b.abs());
                if scale > 0.0 {
                    worst = worst.max((a - b).abs() / scale);
                }
            }
        }
    }
    assert!(worst <= 1e-6, "max relative error {worst:e}");
    format!("50 models, max relative error {worst:.1e}")
}

fn first_order() -> String {
    let grid = [0.10, 0.05, 0.01];
    let mut wins = [0usize; 3];
    for seed in 0..100 {
        let cfg = ToyExperimentConfig { seed, injection_scale: 1e-3, injection_grid: grid.to_vec(), ..Default::default() };
        let t = run_additive_experiment(&cfg).unwrap();
        for (j, &p) in grid.iter().enumerate() {
            let dl = |d| (t.rows.iter().find(|r| r.direction == d && r.p == p).unwrap().loss - t.base_loss).abs();
            if dl(Direction::Lowest) <= dl(Direction::Highest) {
                wins[j] += 1;
            }
        }
    }
    let summary = format!("bottom <= top in {}/{}/{} of 100 at p=0.10/0.05/0.01", wins[0], wins[1], wins[2]);
    assert!(wins.iter().all(|&w| w >= 95), "{summary}");
    summary
}

fn spectral() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(1007);
    for i in 0..200 {
        let m = rng.random_range(1..=16);
        let n = rng.random_range(1..=16);
        let r = 1 + i % m.min(n);
        let g = common::random_low_rank(&mut rng, m, n, r);
        let t = Tensor::new(vec![m, n], g.clone()).unwrap();
        let b = verify_norm_bounds(&t).unwrap();
        assert!(b.lower_holds && b.upper_holds && b.rank == r, "matrix {i}: {b:?}");
        let oracle: f64 = common::jacobi_singular_values(&g, m, n).iter().sum();
        let got = nuclear_norm(&t).unwrap();
        assert!((got - oracle).abs() <= 1e-8 * oracle, "matrix {i}: {got} vs {oracle}");
    }
    assert_eq!(mad(&[1.0, 3.0, 2.0]).unwrap(), 1.5);
    for _ in 0..100 {
        let eps: f64 = rng.random_range(1e-6..10.0);
        let c: f64 = rng.random_range(-100.0..100.0);
        let series: Vec<f64> = (0..rng.random_range(2..60)).map(|_| c + rng.random_range(0.0..=eps)).collect();
        assert!(mad(&series).unwrap() <= eps);
    }
    "200 matrices, mad example, 100 bounded series".into()
}

fn task_vectors(t: &Trio) -> [TaskVector<f32>; 2] {
    let compat = validate_compatibility(&[&t.base, &t.task, &t.reasoning], &NameFilter::default()).unwrap();
    [compute_task_vector(&t.task, &t.base, &compat).unwrap(), compute_task_vector(&t.reasoning, &t.base, &compat).unwrap()]
}

fn baselines() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(1008);
    for _ in 0..20 {
        let t = trio(&mut rng, 1000, false);
        let tv = task_vectors(&t);
        let ta = task_arithmetic_merge(&t.base, &tv, 0.3).unwrap();
        let dare = dare_merge(&t.base, &tv, 0.3, 0.0, rng.random()).unwrap();
        let ties = ties_merge(&t.base, &tv[..1], 0.3, 1.0).unwrap();
        let ta1 = task_arithmetic_merge(&t.base, &tv[..1], 0.3).unwrap();
        for name in t.base.names() {
            assert_eq!(bits(&dare, name), bits(&ta, name));
            assert_eq!(bits(&ties, name), bits(&ta1, name));
        }
    }
    let delta: Vec<f32> = (0..1_000_000).map(|i| 1.0 + (i % 97) as f32).collect();
    let mut fractions = Vec::new();
    for rate in [0.9, 0.5, 0.1] {
        let out = dare_process(&delta, rate, 42, 0, "model.layers.0.mlp.weight");
        let scale = 1.0f32 / (1.0 - rate as f32);
        let mut dropped = 0usize;
        for (o, d) in out.iter().zip(&delta) {
            if *o == 0.0 {
                dropped += 1;
            } else {
                assert_eq!(*o, d * scale);
            }
        }
        let frac = dropped as f64 / delta.len() as f64;
        assert!((frac - rate).abs() <= 0.002, "rate {rate}: dropped {frac}");
        fractions.push(format!("{frac:.4}"));
    }
    format!("drop fractions {} for 0.9/0.5/0.1", fractions.join("/"))
}

fn run_cli(args: &[&str], threads: &str) {
    let out = Command::new(env!("CARGO_BIN_EXE_gradmerge"))
        .args(args)
        .args(["--threads", threads, "--log-level", "warn"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn report_without_timing_or_paths(path: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("elapsed_seconds");
    // Each run writes to its own paths.
    for key in ["output", "report_output"] {
        v["recipe"].as_object_mut().unwrap().remove(key);
    }
    v
}

fn determinism() -> String {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(1009);
    let t = trio(&mut rng, 300_000, true);
    for (m, n) in [(&t.base, "base"), (&t.task, "task"), (&t.reasoning, "reason")] {
        write_checkpoint(d.join(format!("{n}.safetensors")), m, WriteOptions::default()).unwrap();
    }
    save_importance(d.join("imp_t.safetensors"), &t.imp_t).unwrap();
    save_importance(d.join("imp_r.safetensors"), &t.imp_r).unwrap();
    let models = json!({"base": "base.safetensors", "task_model": "task.safetensors", "reasoning_model": "reason.safetensors"});
    let recipes = [
        json!({"method": "reason-any", "task_importance": "imp_t.safetensors", "reasoning_importance": "imp_r.safetensors"}),
        json!({"method": "task-arithmetic"}),
        json!({"method": "ties"}),
        json!({"method": "dare", "seed": 3}),
        json!({"method": "linear", "task_model": "task.safetensors", "reasoning_model": "reason.safetensors"}),
    ];
    for (i, extra) in recipes.iter().enumerate() {
        let mut v = if extra["method"] == "linear" { json!({}) } else { models.clone() };
        v.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
        let recipe = d.join(format!("recipe{i}.json"));
        std::fs::write(&recipe, v.to_string()).unwrap();
        let mut seen = Vec::new();
        for (run, threads) in ["1", "4", "1"].iter().enumerate() {
            let (out, report) = (d.join(format!("out{i}_{run}.st")), d.join(format!("report{i}_{run}.json")));
            let (o, r) = (out.to_str().unwrap(), report.to_str().unwrap());
            run_cli(&["merge", recipe.to_str().unwrap(), "--output", o, "--report-output", r], threads);
            seen.push((std::fs::read(&out).unwrap(), report_without_timing_or_paths(&report)));
        }
        for w in seen.windows(2) {
            assert_eq!(w[0].1, w[1].1, "recipe {extra}: reports differ");
            assert!(w[0].0 == w[1].0, "recipe {extra}: checkpoints differ");
        }
    }
    let mut tables = Vec::new();
    for (run, threads) in ["1", "4", "1"].iter().enumerate() {
        let out = d.join(format!("exp{run}"));
        std::fs::create_dir(&out).unwrap();
        run_cli(&["experiment", "--seed", "0", "--out-dir", out.to_str().unwrap()], threads);
        let files: Vec<Vec<u8>> = ["config.json", "additive.csv", "additive.json", "comparison.csv", "comparison.json"]
            .iter()
            .map(|f| std::fs::read(out.join(f)).unwrap())
            .collect();
        tables.push(files);
    }
    assert!(tables.windows(2).all(|w| w[0] == w[1]), "experiment outputs differ");
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/comparison_seed0.csv");
    assert_eq!(tables[0][3], std::fs::read(golden).unwrap(), "experiment differs from golden table");
    "5 recipes and the experiment, threads 1/4/1".into()
}

fn checkpoint_format() -> String {
    let dir = tempfile::tempdir().unwrap();
    let mut m = WeightMap::new();
    for (i, &dtype) in Dtype::ALL.iter().enumerate() {
        let n = 5 + i;
        let bytes: Vec<u8> = (0..n * dtype.width()).map(|b| (b * 31 + 7 * i) as u8).collect();
        let bytes = if dtype == Dtype::Bool { bytes.iter().map(|b| b & 1).collect() } else { bytes };
        m.insert_raw(format!("t{i:02}"), RawTensor::from_bytes(dtype, vec![n], bytes).unwrap());
    }
    let (a, b) = (dir.path().join("a.st"), dir.path().join("b.st"));
    write_checkpoint(&a, &m, WriteOptions::default()).unwrap();
    let opened = open_checkpoint(&a).unwrap();
    for name in m.names() {
        assert_eq!(opened.read_raw(name).unwrap(), m.read_raw(name).unwrap(), "{name}");
    }
    write_checkpoint(&b, &opened, WriteOptions::default()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let corpus = common::malformed_corpus();
    assert_eq!(corpus.len(), 12);
    for (i, (what, bytes, category)) in corpus.into_iter().enumerate() {
        let path = dir.path().join(format!("bad{i}.st"));
        std::fs::write(&path, bytes).unwrap();
        match open_checkpoint(&path) {
            Ok(_) => panic!("{what}: accepted"),
            Err(e) => assert_eq!(e.category(), category, "{what}: {e}"),
        }
    }
    format!("{} dtypes round-tripped, 12 malformed headers rejected", Dtype::ALL.len())
}

type Criterion = (&'static str, fn() -> String, Option<u64>);

fn main() {
    let criteria: [Criterion; 10] = [
        ("disjointness", disjointness, Some(30)),
        ("reconstruction identities", reconstruction, None),
        ("selection exactness", selection_exactness, Some(60)),
        ("constructed union", constructed_union, None),
        ("gradient oracle", gradient_oracle, Some(20)),
        ("first-order sensitivity", first_order, None),
        ("spectral bounds", spectral, Some(30)),
        ("baseline degenerations", baselines, None),
        ("determinism", determinism, None),
        ("checkpoint format", checkpoint_format, None),
    ];
    // Keep panic messages out of the report; they are shown on the FAIL line.
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, f, budget) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f));
        let elapsed = start.elapsed();
        let verdict = match result {
            Ok(detail) => match budget.map(Duration::from_secs) {
                Some(limit) if elapsed > limit => Err(format!("{detail}; over the {}s budget", limit.as_secs())),
                _ => Ok(detail),
            },
            Err(e) => Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match verdict {
            Ok(detail) => println!("PASS {name} ({:.2}s): {detail}", elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({:.2}s): {why}", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
