//! Seeded synthetic regression problems with known noise structure.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::Dataset;
use crate::matrix::Matrix;
use crate::seed;

/// `y = x·β + ε`, `x ~ U[-1, 1]^d`, `ε ~ N(0, 1)`, with `β_j = 1 / (j + 1)`.
pub fn gaussian_linear(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = seed::rng(seed);
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = (0..n)
        .map(|i| {
            let signal: f64 = (0..d).map(|j| x[i * d + j] / (j + 1) as f64).sum();
            let e: f64 = StandardNormal.sample(&mut rng);
            signal + e
        })
        .collect();
    Dataset::new(Matrix::from_vec(n, d, x).expect("sized"), y).expect("valid synthetic data")
}

/// `y = x₀·ε` with `x₀ ~ U[0.1, 2]`; extra columns are uniform distractors.
/// The conditional standard deviation of `y` is `x₀`.
pub fn heteroscedastic(n: usize, distractors: usize, seed: u64) -> Dataset {
    let d = 1 + distractors;
    let mut rng = seed::rng(seed);
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let scale = rng.random_range(0.1..2.0);
        x.push(scale);
        for _ in 0..distractors {
            x.push(rng.random_range(-1.0..1.0));
        }
        let e: f64 = StandardNormal.sample(&mut rng);
        y.push(scale * e);
    }
    Dataset::new(Matrix::from_vec(n, d, x).expect("sized"), y).expect("valid synthetic data")
}

/// Conditional standard deviation of [`heteroscedastic`] rows.
pub fn heteroscedastic_std(dataset: &Dataset) -> Vec<f64> {
    dataset.features.column(0)
}

/// A sinusoidal mean with noise growing in `|x₀|`, used by the search benches.
pub fn sine_heteroscedastic(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = seed::rng(seed);
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = (0..n)
        .map(|i| {
            let x0 = x[i * d];
            let e: f64 = StandardNormal.sample(&mut rng);
            2.0 * (3.0 * x0).sin() + 3.0 + (0.1 + x0.abs()) * e
        })
        .collect();
    Dataset::new(Matrix::from_vec(n, d, x).expect("sized"), y).expect("valid synthetic data")
}

/// Two-arm data with both potential outcomes recorded.
///
/// Treatment is a fair coin independent of `x`. Side columns: `t`, `y0`, `y1`.
/// `y0 = x₀ + ε₀`, `y1 = x₀ + effect·x₁ + ε₁` with independent unit noise.
pub fn two_arm(n: usize, d: usize, effect: f64, seed: u64) -> Dataset {
    assert!(d >= 2);
    let mut rng = seed::rng(seed);
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut t = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let (x0, x1) = (x[i * d], x[i * d + 1]);
        let e0: f64 = StandardNormal.sample(&mut rng);
        let e1: f64 = StandardNormal.sample(&mut rng);
        let a = x0 + 2.0 + e0;
        let b = x0 + 2.0 + effect * x1 + e1;
        let treated = rng.random_bool(0.5);
        t.push(if treated { 1.0 } else { 0.0 });
        y0.push(a);
        y1.push(b);
        y.push(if treated { b } else { a });
    }
    let mut ds = Dataset::new(Matrix::from_vec(n, d, x).expect("sized"), y).expect("valid synthetic data");
    ds.side_columns.insert("t".into(), t);
    ds.side_columns.insert("y0".into(), y0);
    ds.side_columns.insert("y1".into(), y1);
    ds.label_unit_columns.extend(["y0".to_string(), "y1".to_string()]);
    ds
}

/// Generator names accepted by [`named`].
pub const NAMES: [&str; 4] = ["gaussian", "heteroscedastic", "sine", "two_arm"];

/// A named generator at its default size: `gaussian` (1000 × 5),
/// `heteroscedastic` (1000 rows, 4 distractors), `sine` (1000 × 3) and
/// `two_arm` (2000 × 3, effect 1). An optional `:<n>` suffix sets the row count.
pub fn named(spec: &str, seed: u64) -> Option<Dataset> {
    let (name, n) = match spec.split_once(':') {
        Some((name, n)) => (name, Some(n.parse::<usize>().ok()?)),
        None => (spec, None),
    };
    Some(match name {
        "gaussian" => gaussian_linear(n.unwrap_or(1000), 5, seed),
        "heteroscedastic" => heteroscedastic(n.unwrap_or(1000), 4, seed),
        "sine" => sine_heteroscedastic(n.unwrap_or(1000), 3, seed),
        "two_arm" => two_arm(n.unwrap_or(2000), 3, 1.0, seed),
        _ => return None,
    })
}
