//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ivselect_core::median::JustIdentifiedTable;
use ivselect_core::Dataset;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Gaussian instruments, positive first-stage coefficients, every third
/// instrument invalid.
pub fn random_dataset(seed: u64, n: usize, k_x: usize, k_z: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = || -> f64 { rng.sample(StandardNormal) };
    let z = DMatrix::from_fn(n, k_z, |_, _| g());
    let pi = DMatrix::from_fn(k_z, k_x, |_, _| 1.0 + g().abs());
    let u = DVector::from_fn(n, |_, _| g());
    let e = DMatrix::from_fn(n, k_x, |_, _| g()) + &u * DMatrix::from_element(1, k_x, 0.3);
    let x = &z * pi + e;
    let beta = DVector::from_fn(k_x, |_, _| g());
    let alpha = DVector::from_fn(k_z, |j, _| if j % 3 == 0 { g() } else { 0.0 });
    let y = &x * beta + &z * alpha + u;
    Dataset::new(y, x, z).unwrap()
}

pub fn plain_median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Value of the node reached by an ordered prefix: a leaf once the prefix
/// has k_x members, otherwise the componentwise median over every unused
/// next instrument.
pub fn tuple_node(table: &JustIdentifiedTable, prefix: &mut Vec<usize>) -> Vec<f64> {
    if prefix.len() == table.k_x {
        let mut key = prefix.clone();
        key.sort();
        return table.entries[&key].beta.iter().copied().collect();
    }
    let mut children = Vec::new();
    for l in 0..table.k_z {
        if prefix.contains(&l) {
            continue;
        }
        prefix.push(l);
        children.push(tuple_node(table, prefix));
        prefix.pop();
    }
    (0..table.k_x)
        .map(|q| plain_median(children.iter().map(|c| c[q]).collect()))
        .collect()
}

pub struct LassoProblem {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub w: Vec<f64>,
}

/// Random weighted Lasso problem with n ≤ 200 and k ≤ 12.
pub fn lasso_problem(seed: u64) -> LassoProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=12);
    let n = rng.random_range(k + 5..=200);
    let rho: f64 = rng.random_range(0.0..0.7);
    let mut x = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    // Correlated neighbours make drops more likely.
    for j in 1..k {
        let prev = x.column(j - 1).into_owned();
        x.column_mut(j).axpy(rho, &prev, 1.0);
    }
    let truth = DVector::from_fn(k, |j, _| if j % 2 == 0 { rng.random_range(-2.0..2.0) } else { 0.0 });
    let noise = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = &x * truth + noise;
    let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..5.0)).collect();
    if seed.is_multiple_of(5) {
        w[k - 1] = f64::INFINITY;
    }
    LassoProblem { x, y, w }
}

/// Minimises ½‖y − Xa‖² + λ Σ w_j|a_j| by cyclic coordinate descent.
pub fn coordinate_descent(p: &LassoProblem, lambda: f64, start: &DVector<f64>) -> DVector<f64> {
    let k = p.x.ncols();
    let norms: Vec<f64> = (0..k).map(|j| p.x.column(j).norm_squared()).collect();
    let mut a = start.clone();
    let mut r = &p.y - &p.x * &a;
    for _ in 0..200_000 {
        let mut delta: f64 = 0.0;
        for j in 0..k {
            if !p.w[j].is_finite() {
                continue;
            }
            let rho = p.x.column(j).dot(&r) + norms[j] * a[j];
            let t = lambda * p.w[j];
            let new = rho.signum() * (rho.abs() - t).max(0.0) / norms[j];
            let d = new - a[j];
            if d != 0.0 {
                r.axpy(-d, &p.x.column(j), 1.0);
                a[j] = new;
                delta = delta.max(d.abs());
            }
        }
        if delta < 1e-13 {
            break;
        }
    }
    a
}

/// Largest violation of the subgradient conditions at (λ, a).
pub fn kkt(p: &LassoProblem, lambda: f64, a: &[f64]) -> f64 {
    let r = &p.y - &p.x * DVector::from_column_slice(a);
    let mut worst: f64 = 0.0;
    for j in 0..a.len() {
        if !p.w[j].is_finite() {
            if a[j] != 0.0 {
                return f64::INFINITY;
            }
            continue;
        }
        let g = p.x.column(j).dot(&r);
        let t = lambda * p.w[j];
        let v = if a[j] == 0.0 { (g.abs() - t).max(0.0) } else { (g - t * a[j].signum()).abs() };
        worst = worst.max(v);
    }
    worst
}

/// Two exposures, five instruments, the first one invalid.
pub fn five_instrument_design(n: usize) -> ivselect_core::simulate::SimConfig {
    let mut c = ivselect_core::simulate::SimConfig::table3(n);
    c.k_z = 5;
    c.alpha = vec![0.4, 0.0, 0.0, 0.0, 0.0];
    c
}

/// Invalid set chosen by the full pipeline with Sargan downward testing.
pub fn pipeline_invalid_set(data: &Dataset) -> Vec<usize> {
    use ivselect_core::pipeline::{run_select, SelectOptions};
    let (report, _) = run_select(data, None, &SelectOptions::default()).unwrap();
    report
        .selection
        .invalid
        .iter()
        .map(|l| data.instrument_index(l).unwrap())
        .collect()
}
