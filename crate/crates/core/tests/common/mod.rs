//! Independent oracles and fixtures shared by the integration and acceptance
//! suites. Nothing here calls the code under test for the values it checks.
#![allow(dead_code)]

use std::collections::BTreeMap;

use gradmerge::importance::{ImportanceMap, Provenance};
use gradmerge::{Tensor, WeightMap};
use rand::{Rng, RngExt};

/// Random importance over a few tensors. With `ties` the scores come from a
/// handful of values (zero included) so thresholds fall inside runs of equal
/// scores.
pub fn random_importance<R: Rng>(rng: &mut R, max_total: usize, ties: bool) -> ImportanceMap {
    let n_tensors = rng.random_range(1..=4);
    let mut scores = BTreeMap::new();
    let budget = rng.random_range(1..=max_total);
    for t in 0..n_tensors {
        let len = (budget / n_tensors).max(1);
        let shape = if len % 2 == 0 && rng.random_bool(0.5) {
            vec![2, len / 2]
        } else {
            vec![len]
        };
        let data: Vec<f32> = (0..len)
            .map(|_| {
                if ties {
                    [0.0f32, 0.25, 0.5, 1.0, 3.0][rng.random_range(0..5)]
                } else {
                    rng.random_range(0.0f32..10.0)
                }
            })
            .collect();
        scores.insert(format!("t{t}.w"), Tensor::new(shape, data).unwrap());
    }
    ImportanceMap::new(scores, Provenance::default()).unwrap()
}

/// Full-sort selection. Positions are (name, flat index) in canonical order.
pub fn sort_select(imp: &ImportanceMap, p: f64, per_tensor: bool, largest: bool, exclude_zero: bool) -> Vec<(String, usize)> {
    let groups: Vec<Vec<(String, usize, f32)>> = if per_tensor {
        imp.iter()
            .map(|(n, t)| t.data().iter().enumerate().map(|(i, &v)| (n.to_string(), i, v)).collect())
            .collect()
    } else {
        vec![imp
            .iter()
            .flat_map(|(n, t)| t.data().iter().enumerate().map(move |(i, &v)| (n.to_string(), i, v)))
            .collect()]
    };
    let mut out = Vec::new();
    for group in groups {
        let k = (p * group.len() as f64).round() as usize;
        let mut pool: Vec<(usize, &(String, usize, f32))> = group
            .iter()
            .enumerate()
            .filter(|(_, e)| !(exclude_zero && !largest && e.2 == 0.0))
            .collect();
        // Stable sort keeps canonical order among equal scores.
        if largest {
            pool.sort_by(|a, b| b.1 .2.partial_cmp(&a.1 .2).unwrap());
        } else {
            pool.sort_by(|a, b| a.1 .2.partial_cmp(&b.1 .2).unwrap());
        }
        out.extend(pool.into_iter().take(k).map(|(_, e)| (e.0.clone(), e.1)));
    }
    out.sort();
    out
}

/// Singular values by one-sided Jacobi: rotate column pairs of G until all are
/// orthogonal, which diagonalizes GᵀG without forming it. Row-major input.
pub fn jacobi_singular_values(g: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut a = g.to_vec();
    let col = |a: &[f64], j: usize| -> Vec<f64> { (0..rows).map(|i| a[i * cols + j]).collect() };
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let (cp, cq) = (col(&a, p), col(&a, q));
                let alpha: f64 = cp.iter().map(|x| x * x).sum();
                let beta: f64 = cq.iter().map(|x| x * x).sum();
                let gamma: f64 = cp.iter().zip(&cq).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= 1e-300 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (a[i * cols + p], a[i * cols + q]);
                    a[i * cols + p] = c * x - s * y;
                    a[i * cols + q] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..cols).map(|j| col(&a, j).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Random m×n matrix of rank r (product of m×r and r×n Gaussian-ish factors).
pub fn random_low_rank<R: Rng>(rng: &mut R, m: usize, n: usize, r: usize) -> Vec<f64> {
    let u: Vec<f64> = (0..m * r).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..r * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    (0..m * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            (0..r).map(|k| u[i * r + k] * v[k * n + j]).sum()
        })
        .collect()
}

/// Container bytes: u64 LE header length, header text, data.
pub fn container(header: &[u8], data: &[u8]) -> Vec<u8> {
    let mut out = (header.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(header);
    out.extend_from_slice(data);
    out
}

/// Twelve malformed files and the error category each must produce.
pub fn malformed_corpus() -> Vec<(&'static str, Vec<u8>, &'static str)> {
    let one = |h: &str, data_len: usize| container(h.as_bytes(), &vec![0u8; data_len]);
    vec![
        ("shorter than the length prefix", vec![1, 2, 3], "format"),
        ("header length past end of file", {
            let mut v = container(b"{}", b"");
            v[0] = 200;
            v
        }, "format"),
        ("header not utf-8", container(&[b'{', 0xff, 0xfe, b'}'], b""), "format"),
        ("header not json", one("{\"a\": ", 0), "format"),
        ("header is an array", one("[]", 0), "format"),
        (
            "duplicate tensor name",
            one(
                r#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
                8,
            ),
            "format",
        ),
        ("unknown dtype", one(r#"{"w":{"dtype":"F12","shape":[1],"data_offsets":[0,4]}}"#, 4), "format"),
        ("byte length disagrees with shape", one(r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,4]}}"#, 4), "format"),
        ("range beyond data", one(r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#, 4), "format"),
        (
            "overlapping ranges",
            one(
                r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
                8,
            ),
            "format",
        ),
        (
            "gap between ranges",
            one(
                r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"b":{"dtype":"F32","shape":[1],"data_offsets":[8,12]}}"#,
                12,
            ),
            "format",
        ),
        ("trailing bytes", one(r#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#, 8), "format"),
    ]
}

/// Three single-tensor models over `len` elements. The task delta lives on
/// `task_support`, the reasoning delta on `reason_support`.
pub struct UnionInstance {
    pub base: WeightMap,
    pub task: WeightMap,
    pub reasoning: WeightMap,
    pub task_importance: ImportanceMap,
    pub reasoning_importance: ImportanceMap,
    /// base + τ_t on its support + τ_r on its support, computed elementwise.
    pub expected: Vec<f32>,
    pub p_t: f64,
    pub p_r: f64,
}

pub fn union_instance<R: Rng>(rng: &mut R, len: usize) -> UnionInstance {
    let mut idx: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    let nt = rng.random_range(1..len / 2);
    let nr = rng.random_range(1..len / 2);
    let (ts, rs) = (&idx[..nt], &idx[nt..nt + nr]);
    let base: Vec<f32> = (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let mut task = base.clone();
    let mut reasoning = base.clone();
    let mut imp_t = vec![0.0f32; len];
    let mut imp_r = vec![0.0f32; len];
    for i in 0..len {
        imp_t[i] = rng.random_range(0.0f32..1.0);
        imp_r[i] = rng.random_range(2.0f32..3.0);
    }
    for &i in ts {
        task[i] = base[i] + rng.random_range(-0.5f32..0.5);
        imp_t[i] = rng.random_range(5.0f32..6.0);
    }
    for &i in rs {
        reasoning[i] = base[i] + rng.random_range(-0.5f32..0.5);
        imp_r[i] = rng.random_range(0.0f32..1.0);
    }
    let mut expected = base.clone();
    for &i in ts {
        expected[i] = base[i] + (task[i] - base[i]);
    }
    for &i in rs {
        expected[i] = base[i] + (reasoning[i] - base[i]);
    }
    let single = |v: &[f32]| {
        let mut m = WeightMap::new();
        m.insert_native("w", &Tensor::from_vec(v.to_vec()));
        m
    };
    let imp = |v: Vec<f32>| {
        ImportanceMap::new(BTreeMap::from([("w".to_string(), Tensor::from_vec(v))]), Provenance::default()).unwrap()
    };
    UnionInstance {
        base: single(&base),
        task: single(&task),
        reasoning: single(&reasoning),
        task_importance: imp(imp_t),
        reasoning_importance: imp(imp_r),
        expected,
        p_t: nt as f64 / len as f64,
        p_r: nr as f64 / len as f64,
    }
}
