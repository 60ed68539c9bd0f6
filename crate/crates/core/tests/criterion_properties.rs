//! Invariances of the loss terms and the kernel-evaluation accounting.

use cliff_core::criterion::{
    expected_kernel_evals, kl_points, normalized_derivative_magnitude, total_loss_with, CliffLossReport,
    CliffWeights, KlPoints,
};
use cliff_core::density::{integrate, standardize};
use cliff_core::diffgraph::Graph;
use cliff_core::selfcheck::random_batch;
use proptest::prelude::*;

fn report(data: &[f64], n: usize, d: usize, rows: &[usize]) -> CliffLossReport {
    let weights = CliffWeights::with_lambdas(1.0, 1.0, 1.0);
    let points = kl_points(KlPoints::Midpoints, weights.kernel.grid_k, &mut rand::rng());
    let mut g = Graph::new();
    let raw = g.constant(data.to_vec(), &[n, d]).unwrap();
    total_loss_with(&mut g, raw, &weights, rows, &points)
        .unwrap()
        .report
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Batches with some structure so every term is well away from degenerate.
fn batch(n: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut v = random_batch(n, d, seed);
    for (k, x) in v.iter_mut().enumerate() {
        if (k / d) % 3 == 0 {
            *x += 2.5;
        }
    }
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn positive_affine_maps_leave_every_term_unchanged(
        seed in 0u64..500,
        n in 30usize..120,
        scale in prop::collection::vec(0.05f64..20.0, 2),
        shift in prop::collection::vec(-50.0f64..50.0, 2),
    ) {
        let d = 2;
        let x = batch(n, d, seed);
        let y: Vec<f64> = x.iter().enumerate().map(|(k, v)| v * scale[k % d] + shift[k % d]).collect();
        let rows: Vec<usize> = (0..10).collect();
        let (a, b) = (report(&x, n, d, &rows), report(&y, n, d, &rows));
        prop_assert!(close(a.l_uni, b.l_uni, 1e-9));
        prop_assert!(close(a.l_biv, b.l_biv, 1e-9));
        prop_assert!(close(a.l_kl_uni, b.l_kl_uni, 1e-9));
    }

    #[test]
    fn reflecting_a_factor_leaves_every_term_unchanged(seed in 0u64..500, n in 30usize..120, col in 0usize..3) {
        let d = 3;
        let x = batch(n, d, seed);
        let y: Vec<f64> = x.iter().enumerate().map(|(k, &v)| if k % d == col { -v } else { v }).collect();
        let rows: Vec<usize> = (0..10).collect();
        let (a, b) = (report(&x, n, d, &rows), report(&y, n, d, &rows));
        prop_assert!(close(a.l_uni, b.l_uni, 1e-9));
        prop_assert!(close(a.l_biv, b.l_biv, 1e-9));
        prop_assert!(close(a.l_kl_uni, b.l_kl_uni, 1e-9));
    }

    #[test]
    fn factor_permutation_permutes_the_report(seed in 0u64..500, n in 30usize..120) {
        let d = 3;
        let perm = [2usize, 0, 1];
        let x = batch(n, d, seed);
        // column c of y is column perm[c] of x
        let y: Vec<f64> = (0..n).flat_map(|r| perm.iter().map(move |&c| (r, c))).map(|(r, c)| x[r * d + c]).collect();
        let rows: Vec<usize> = (0..10).collect();
        let (a, b) = (report(&x, n, d, &rows), report(&y, n, d, &rows));
        prop_assert!(close(a.total, b.total, 1e-12));
        for c in 0..d {
            prop_assert!(close(b.per_factor_entropy[c], a.per_factor_entropy[perm[c]], 1e-12));
            prop_assert!(close(b.per_factor_kl[c], a.per_factor_kl[perm[c]], 1e-12));
            for e in 0..d {
                prop_assert!(close(b.per_pair_jsd[c][e], a.per_pair_jsd[perm[c]][perm[e]], 1e-12));
            }
        }
    }

    #[test]
    fn sample_order_does_not_matter(seed in 0u64..500, n in 30usize..120) {
        let d = 2;
        let x = batch(n, d, seed);
        // reversed sample order; conditioning rows follow their samples
        let y: Vec<f64> = (0..n).rev().flat_map(|r| x[r * d..(r + 1) * d].to_vec()).collect();
        let rows: Vec<usize> = (0..10).collect();
        let moved: Vec<usize> = rows.iter().map(|r| n - 1 - r).collect();
        let (a, b) = (report(&x, n, d, &rows), report(&y, n, d, &moved));
        prop_assert!(close(a.total, b.total, 1e-9));
        prop_assert!(close(a.l_uni, b.l_uni, 1e-9));
    }

    #[test]
    fn pairwise_divergences_are_nonnegative(seed in 0u64..500, n in 20usize..100, d in 2usize..4) {
        let x = random_batch(n, d, seed);
        let rows: Vec<usize> = (0..n.min(20)).collect();
        let r = report(&x, n, d, &rows);
        for i in 0..d {
            for j in 0..d {
                prop_assert!(r.per_pair_jsd[i][j] >= -1e-9);
            }
        }
        prop_assert!(r.l_biv >= -1e-9);
    }

    #[test]
    fn normalized_derivative_magnitude_has_unit_mass(seed in 0u64..500, n in 5usize..200) {
        let weights = CliffWeights::default();
        let mut g = Graph::new();
        let raw = g.constant(random_batch(n, 1, seed), &[n, 1]).unwrap();
        let b = standardize(&mut g, raw).unwrap();
        let s = normalized_derivative_magnitude(&mut g, &b, 0, &weights.kernel).unwrap();
        prop_assert!(g.value(s.values).iter().all(|&v| v >= 0.0));
        let mass = integrate(&mut g, &s);
        prop_assert!((g.scalar(mass) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn kernel_counters_follow_the_complexity_formula() {
    for (n, d, m) in [(50, 2, 20), (64, 3, 7), (31, 4, 31), (40, 1, 20)] {
        let weights = CliffWeights {
            m_conditioning: m,
            ..CliffWeights::with_lambdas(1.0, 1.0, 1.0)
        };
        let rows: Vec<usize> = (0..m).collect();
        let points = kl_points(KlPoints::Midpoints, weights.kernel.grid_k, &mut rand::rng());
        let mut g = Graph::new();
        let raw = g.constant(random_batch(n, d, 5), &[n, d]).unwrap();
        let loss = total_loss_with(&mut g, raw, &weights, &rows, &points).unwrap();
        let expected = expected_kernel_evals(d, n, &weights);
        let k = weights.kernel.grid_k as u64;
        let (n64, d64, m64) = (n as u64, d as u64, m as u64);
        assert_eq!(expected.uni, d64 * k * n64);
        assert_eq!(expected.biv, d64 * d64.saturating_sub(1) * m64 * k * n64);
        assert_eq!(expected.kl_uni, d64 * k * n64);
        assert_eq!(loss.report.kernel_evals, expected, "n {n} d {d} M {m}");
    }
}
