//! Every density estimator against a naive double-loop sum.

use cliff_core::density::{
    conditional_derivative, gaussian, integrate, joint_pdf_partial, marginal_pdf, marginal_pdf_derivative,
    standardize, KernelConfig, StandardizedBatch,
};
use cliff_core::diffgraph::{Graph, EPS};
use cliff_core::selfcheck::random_batch;
use proptest::prelude::*;

const TOL: f64 = 1e-10;

fn gaussian_slope(x: f64, sigma: f64) -> f64 {
    -x / (sigma * sigma) * gaussian(x, sigma)
}

/// Standardized columns read back from the graph.
fn columns(g: &Graph, batch: &StandardizedBatch) -> Vec<Vec<f64>> {
    let v = g.value(batch.values);
    (0..batch.d)
        .map(|i| (0..batch.n).map(|k| v[k * batch.d + i]).collect())
        .collect()
}

fn naive_marginal(z: &[f64], t: f64, sigma: f64) -> f64 {
    let mut s = 0.0;
    for &zk in z {
        s += gaussian(t - zk, sigma);
    }
    s / z.len() as f64
}

fn naive_derivative(z: &[f64], t: f64, sigma: f64) -> f64 {
    let mut s = 0.0;
    for &zk in z {
        s += gaussian_slope(t - zk, sigma);
    }
    s / z.len() as f64
}

fn naive_joint_partial(zi: &[f64], zj: &[f64], t: f64, zeta: f64, sigma: f64) -> f64 {
    let mut s = 0.0;
    for k in 0..zi.len() {
        s += gaussian_slope(t - zi[k], sigma) * gaussian(zeta - zj[k], sigma);
    }
    s / zi.len() as f64
}

fn check_all(n: usize, d: usize, seed: u64, sigma: f64) {
    let cfg = KernelConfig {
        sigma,
        ..KernelConfig::default()
    };
    let mut g = Graph::new();
    let raw = g.constant(random_batch(n, d, seed), &[n, d]).unwrap();
    let batch = standardize(&mut g, raw).unwrap();
    let cols = columns(&g, &batch);
    let points = cfg.grid_points();
    let rows: Vec<usize> = (0..n.min(5)).collect();

    for i in 0..d {
        let p = marginal_pdf(&mut g, &batch, i, &cfg).unwrap();
        let dp = marginal_pdf_derivative(&mut g, &batch, i, &cfg).unwrap();
        for (gi, &t) in points.iter().enumerate() {
            assert!((g.value(p.values)[gi] - naive_marginal(&cols[i], t, sigma)).abs() <= TOL);
            assert!((g.value(dp.values)[gi] - naive_derivative(&cols[i], t, sigma)).abs() <= TOL);
        }
        for j in (0..d).filter(|&j| j != i) {
            let zeta_vals: Vec<f64> = rows.iter().map(|&r| cols[j][r]).collect();
            let zeta = g.constant(zeta_vals.clone(), &[rows.len(), 1]).unwrap();
            let joint = joint_pdf_partial(&mut g, &batch, i, j, zeta, &cfg).unwrap();
            let cond = conditional_derivative(&mut g, &batch, i, j, zeta, &cfg).unwrap();
            let m = rows.len();
            for (gi, &t) in points.iter().enumerate() {
                for (mi, &z) in zeta_vals.iter().enumerate() {
                    let expect = naive_joint_partial(&cols[i], &cols[j], t, z, sigma);
                    assert!((g.value(joint.values)[gi * m + mi] - expect).abs() <= TOL);
                    let expect_cond = expect / (naive_marginal(&cols[j], z, sigma) + EPS);
                    let got = g.value(cond.values)[gi * m + mi];
                    assert!(
                        (got - expect_cond).abs() <= TOL * expect_cond.abs().max(1.0),
                        "conditional ({i}|{j}) at ({t}, {z}): {got} vs {expect_cond}"
                    );
                }
            }
        }
    }
}

#[test]
fn estimators_match_double_loops() {
    check_all(200, 3, 1, 0.1);
    check_all(17, 2, 2, 0.3);
}

#[test]
fn marginal_mass_is_near_one() {
    for &sigma in &[0.05, 0.1, 0.25, 0.5] {
        for seed in 0..3 {
            let cfg = KernelConfig {
                sigma,
                ..KernelConfig::default()
            };
            let mut g = Graph::new();
            let raw = g.constant(random_batch(200, 1, seed), &[200, 1]).unwrap();
            let batch = standardize(&mut g, raw).unwrap();
            let p = marginal_pdf(&mut g, &batch, 0, &cfg).unwrap();
            let mass = integrate(&mut g, &p);
            let m = g.scalar(mass);
            assert!((0.99..=1.001).contains(&m), "σ = {sigma}: mass {m}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn estimators_match_double_loops_on_random_batches(
        n in 3usize..=200,
        d in 2usize..=3,
        seed in 0u64..1000,
        sigma in 0.05f64..0.5,
    ) {
        check_all(n, d, seed, sigma);
    }
}
