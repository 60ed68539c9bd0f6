//! Finite-difference verification of every loss term on random batches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::criterion::{conditioning_rows, kl_points, total_loss_with, CliffWeights, ConditioningPolicy};
use crate::diffgraph::{GradCheck, Graph, OpKind, Var};
use crate::error::Result;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Uni,
    Biv,
    KlUni,
    Total,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::Uni, Term::Biv, Term::KlUni, Term::Total];

    pub fn name(self) -> &'static str {
        match self {
            Term::Uni => "l_uni",
            Term::Biv => "l_biv",
            Term::KlUni => "l_kl_uni",
            Term::Total => "total",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TermCheck {
    pub term: Term,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    /// Coordinates differenced with a reduced step near an `abs` kink.
    pub refined_coordinates: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct SelfCheck {
    pub weights: CliffWeights,
    pub fd_step: f64,
    pub tolerance: f64,
    pub negate: Option<OpKind>,
}

impl Default for SelfCheck {
    fn default() -> Self {
        SelfCheck {
            weights: CliffWeights::with_lambdas(1.0, 1.0, 1.0),
            fd_step: DEFAULT_FD_STEP,
            tolerance: DEFAULT_TOLERANCE,
            negate: None,
        }
    }
}

/// A standard-normal `n × d` batch drawn from `seed`.
pub fn random_batch(n: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect()
}

impl SelfCheck {
    /// Checks each term's gradient with respect to the raw batch. Conditioning
    /// rows and KL points are frozen so the function is deterministic.
    pub fn run(&self, n: usize, d: usize, seed: u64) -> Result<Vec<TermCheck>> {
        self.weights.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let m = self.weights.m_conditioning.min(n);
        let rows = conditioning_rows(ConditioningPolicy::RandomFromBatch, n, m, &mut rng)?;
        let points = kl_points(self.weights.kl_points, self.weights.kernel.grid_k, &mut rng);
        let point = random_batch(n, d, seed);
        let mut checker = GradCheck::new(self.fd_step);
        checker.negate = self.negate;

        let terms: Vec<Term> = Term::ALL
            .into_iter()
            .filter(|&t| t != Term::Biv || d >= 2)
            .collect();
        let f = |g: &mut Graph, x: Var| -> Result<Vec<Var>> {
            let loss = total_loss_with(g, x, &self.weights, &rows, &points)?;
            Ok(terms
                .iter()
                .map(|term| match term {
                    Term::Uni => loss.terms.uni,
                    Term::Biv => loss.terms.biv.expect("d ≥ 2"),
                    Term::KlUni => loss.terms.kl_uni,
                    Term::Total => loss.total,
                })
                .collect())
        };
        let reports = checker.run_many(f, &point, &[n, d])?;
        let out = terms
            .iter()
            .zip(reports)
            .map(|(&term, report)| TermCheck {
                term,
                n,
                d,
                seed,
                max_rel_error: report.max_rel_error,
                worst_coordinate: report.worst_coordinate,
                refined_coordinates: report.refined.len(),
                passed: report.passes(self.tolerance),
            })
            .collect();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_terms_pass_on_a_small_batch() {
        let checks = SelfCheck::default().run(16, 2, 0).unwrap();
        assert_eq!(checks.len(), 4);
        for c in &checks {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn negated_kernel_rule_fails() {
        let sc = SelfCheck {
            negate: Some(OpKind::Gauss),
            ..Default::default()
        };
        let checks = sc.run(16, 2, 0).unwrap();
        assert!(checks.iter().any(|c| !c.passed));
    }
}
