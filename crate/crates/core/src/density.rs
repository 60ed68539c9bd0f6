//! Parzen-window estimates of factor densities and their derivatives.
//!
//! Every estimator is built from graph operations, so anything computed from
//! it backpropagates to the batch (and from there to the encoder). Kernel
//! evaluations are materialised as dense `points × samples` matrices; the
//! pairwise partial derivative is a single contraction of a `K × n` derivative
//! kernel with an `n × M` conditioning kernel.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diffgraph::{Graph, Var, EPS};
use crate::error::{Error, Result};
use crate::io::fmt_float;

/// Columns whose raw standard deviation falls below this are degenerate.
pub const STD_GUARD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub sigma: f64,
    pub grid_a: f64,
    pub grid_b: f64,
    pub grid_k: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            sigma: 0.1,
            grid_a: -5.0,
            grid_b: 5.0,
            grid_k: 100,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!(
                "kernel sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if !(self.grid_a < self.grid_b) {
            return Err(Error::Config(format!(
                "grid bounds must satisfy a < b, got [{}, {}]",
                self.grid_a, self.grid_b
            )));
        }
        if self.grid_k < 2 {
            return Err(Error::Config(format!("grid_k must be ≥ 2, got {}", self.grid_k)));
        }
        Ok(())
    }

    /// Integration weight `(b − a) / K`.
    pub fn spacing(&self) -> f64 {
        (self.grid_b - self.grid_a) / self.grid_k as f64
    }

    /// The `K` left endpoints `a + t·(b − a)/K`.
    pub fn grid_points(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.grid_k).map(|t| self.grid_a + t as f64 * h).collect()
    }
}

/// Univariate Gaussian density `N(x; 0, σ²)`.
pub fn gaussian(x: f64, sigma: f64) -> f64 {
    (-(x * x) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt())
}

/// An `n × d` batch standardized column-wise (population variance).
#[derive(Clone, Debug)]
pub struct StandardizedBatch {
    pub values: Var,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub n: usize,
    pub d: usize,
}

impl StandardizedBatch {
    /// Wraps a tensor the caller guarantees is already standardized.
    pub fn assume_standardized(g: &Graph, values: Var) -> Result<Self> {
        let (n, d) = matrix_dims(g, values, "assume_standardized")?;
        Ok(StandardizedBatch {
            values,
            means: vec![0.0; d],
            stds: vec![1.0; d],
            n,
            d,
        })
    }

    /// Samples of factor `i` as a `1 × n` row.
    pub fn factor_row(&self, g: &mut Graph, i: usize) -> Result<Var> {
        let col = self.factor_column(g, i)?;
        Ok(g.transpose(col))
    }

    /// Samples of factor `i` as an `n × 1` column.
    pub fn factor_column(&self, g: &mut Graph, i: usize) -> Result<Var> {
        if i >= self.d {
            return Err(Error::Dimension(format!(
                "factor {i} of a {}-factor batch",
                self.d
            )));
        }
        g.column(self.values, i)
    }

    /// Values of factor `j` at the given rows, as an `M × 1` column.
    pub fn conditioning_values(&self, g: &mut Graph, j: usize, rows: &[usize]) -> Result<Var> {
        let col = self.factor_column(g, j)?;
        g.gather_rows(col, rows)
    }
}

fn matrix_dims(g: &Graph, v: Var, op: &'static str) -> Result<(usize, usize)> {
    match g.shape(v) {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::InvalidShape {
            op,
            detail: format!("expected an n×d matrix, got {s:?}"),
        }),
    }
}

/// Shifts and scales each column to zero mean and unit population variance.
/// Gradients flow through the mean and the standard deviation.
pub fn standardize(g: &mut Graph, batch: Var) -> Result<StandardizedBatch> {
    let (n, d) = matrix_dims(g, batch, "standardize")?;
    if n < 2 {
        return Err(Error::Dimension(format!("standardization needs n ≥ 2, got {n}")));
    }
    let mean = g.mean_axis(batch, 0)?;
    let mean_b = g.broadcast(mean, &[n, d])?;
    let centered = g.sub(batch, mean_b)?;
    let sq = g.square(centered);
    let var = g.mean_axis(sq, 0)?;
    let std = g.sqrt(var)?;
    if let Some((column, &s)) = g.value(std).iter().enumerate().find(|(_, &s)| s < STD_GUARD) {
        return Err(Error::DegenerateFactor { column, std: s });
    }
    let std_b = g.broadcast(std, &[n, d])?;
    let values = g.div(centered, std_b)?;
    Ok(StandardizedBatch {
        values,
        means: g.value(mean).to_vec(),
        stds: g.value(std).to_vec(),
        n,
        d,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityKind {
    Marginal,
    MarginalDerivative,
    Joint,
    JointPartial,
    ConditionalDerivative,
    ConditionalDerivativeMagnitude,
}

impl DensityKind {
    pub fn is_density(self) -> bool {
        matches!(
            self,
            DensityKind::Marginal | DensityKind::Joint | DensityKind::ConditionalDerivativeMagnitude
        )
    }
}

/// Tabulated values on an evaluation grid: `K × 1`, or `K × M` for families
/// indexed by a conditioning value.
#[derive(Clone, Debug)]
pub struct DensityGrid {
    pub points: Vec<f64>,
    pub values: Var,
    pub spacing: f64,
    pub kind: DensityKind,
}

impl DensityGrid {
    pub fn columns(&self, g: &Graph) -> usize {
        g.shape(self.values).get(1).copied().unwrap_or(1)
    }

    /// CSV with columns `grid_point,value[,conditioning_index]`.
    pub fn to_csv(&self, g: &Graph) -> String {
        let m = self.columns(g);
        let vals = g.value(self.values);
        let mut out = String::from(if m > 1 {
            "grid_point,value,conditioning_index\n"
        } else {
            "grid_point,value\n"
        });
        for c in 0..m {
            for (k, &p) in self.points.iter().enumerate() {
                let v = vals[k * m + c];
                if m > 1 {
                    out.push_str(&format!("{},{},{}\n", fmt_float(p), fmt_float(v), c));
                } else {
                    out.push_str(&format!("{},{}\n", fmt_float(p), fmt_float(v)));
                }
            }
        }
        out
    }
}

/// Kernel matrices of one factor against a fixed set of evaluation points.
#[derive(Clone, Copy, Debug)]
pub struct FactorKernels {
    /// `∂/∂t N(t_g; z_k, σ²) = −(t_g − z_k)/σ² · N`, shape `K × n`.
    pub derivative: Var,
}

/// Gaussian kernel matrix (`order` 0) or its `t`-derivative (`order` 1)
/// between column `at` (`P × 1`) and row `samples` (`1 × n`).
fn kernel_matrix(g: &mut Graph, at: Var, samples: Var, sigma: f64, order: u8) -> Result<Var> {
    let kern = g.gauss_kernel(at, samples, sigma, order)?;
    let (p, n) = (g.shape(at)[0], g.shape(samples)[1]);
    g.count_kernel_evals((p * n) as u64, 0);
    Ok(kern)
}

fn points_column(g: &mut Graph, points: &[f64]) -> Result<Var> {
    g.constant(points.to_vec(), &[points.len(), 1])
}

/// Derivative-kernel matrix of factor `i` at `points`.
pub fn factor_kernels(
    g: &mut Graph,
    batch: &StandardizedBatch,
    i: usize,
    points: &[f64],
    cfg: &KernelConfig,
) -> Result<FactorKernels> {
    let row = batch.factor_row(g, i)?;
    let at = points_column(g, points)?;
    let derivative = kernel_matrix(g, at, row, cfg.sigma, 1)?;
    Ok(FactorKernels { derivative })
}

/// `p(t) = (1/n) Σ_k N(t; z_i^(k), σ²)` at arbitrary constant points (`P × 1`).
pub fn marginal_pdf_at(
    g: &mut Graph,
    batch: &StandardizedBatch,
    i: usize,
    points: &[f64],
    cfg: &KernelConfig,
) -> Result<Var> {
    let row = batch.factor_row(g, i)?;
    let at = points_column(g, points)?;
    let kern = kernel_matrix(g, at, row, cfg.sigma, 0)?;
    g.mean_axis(kern, 1)
}

/// Marginal density of factor `i` on the configured grid.
pub fn marginal_pdf(
    g: &mut Graph,
    batch: &StandardizedBatch,
    i: usize,
    cfg: &KernelConfig,
) -> Result<DensityGrid> {
    let points = cfg.grid_points();
    let values = marginal_pdf_at(g, batch, i, &points, cfg)?;
    Ok(DensityGrid {
        points,
        values,
        spacing: cfg.spacing(),
        kind: DensityKind::Marginal,
    })
}

/// `dp(z_i)/dz_i` on the grid, from precomputed kernels or fresh ones.
pub fn marginal_pdf_derivative(
    g: &mut Graph,
    batch: &StandardizedBatch,
    i: usize,
    cfg: &KernelConfig,
) -> Result<DensityGrid> {
    let points = cfg.grid_points();
    let fk = factor_kernels(g, batch, i, &points, cfg)?;
    derivative_from_kernels(g, &fk, points, cfg)
}

pub fn derivative_from_kernels(
    g: &mut Graph,
    fk: &FactorKernels,
    points: Vec<f64>,
    cfg: &KernelConfig,
) -> Result<DensityGrid> {
    let values = g.mean_axis(fk.derivative, 1)?;
    Ok(DensityGrid {
        points,
        values,
        spacing: cfg.spacing(),
        kind: DensityKind::MarginalDerivative,
    })
}

/// Pairwise pieces shared by the joint partial and the conditional derivative.
struct PairTerms {
    /// `∂p(z_i, z_j)/∂z_i` at `(t_g, ζ_m)`, `K × M`.
    joint_partial: Var,
    /// `p(z_j = ζ_m)`, `1 × M`.
    conditioning_density: Var,
}

fn pair_terms(
    g: &mut Graph,
    batch: &StandardizedBatch,
    fk_i: &FactorKernels,
    j: usize,
    zeta: Var,
    cfg: &KernelConfig,
) -> Result<PairTerms> {
    let (k, n) = (g.shape(fk_i.derivative)[0], g.shape(fk_i.derivative)[1]);
    let m = match g.shape(zeta) {
        [m, 1] => *m,
        s => {
            return Err(Error::InvalidShape {
                op: "joint_pdf_partial",
                detail: format!("conditioning values must be M×1, got {s:?}"),
            })
        }
    };
    if m == 0 {
        return Err(Error::Dimension(
            "at least one conditioning value is required".into(),
        ));
    }
    // n × M kernel N(ζ_m; z_j^(k), σ²)
    let zj = batch.factor_column(g, j)?;
    let zeta_row = g.transpose(zeta);
    let cond_kernel = kernel_matrix(g, zj, zeta_row, cfg.sigma, 0)?;
    // each product term D[g,k]·E[k,m] is one bivariate kernel derivative
    let contracted = g.matmul(fk_i.derivative, cond_kernel)?;
    g.count_kernel_evals(0, (k * m * n) as u64);
    let joint_partial = g.scale(contracted, 1.0 / n as f64);
    let conditioning_density = g.mean_axis(cond_kernel, 0)?;
    Ok(PairTerms {
        joint_partial,
        conditioning_density,
    })
}

fn check_pair(batch: &StandardizedBatch, i: usize, j: usize) -> Result<()> {
    if i == j {
        return Err(Error::Dimension(format!(
            "pairwise estimate needs i ≠ j, got {i} = {j}"
        )));
    }
    if i >= batch.d || j >= batch.d {
        return Err(Error::Dimension(format!(
            "pair ({i}, {j}) of a {}-factor batch",
            batch.d
        )));
    }
    Ok(())
}

/// `∂p(z_i, z_j)/∂z_i` at `(t_g, ζ_m)` with the product kernel `N(·; ·, σ²I)`.
pub fn joint_pdf_partial(
    g: &mut Graph,
    batch: &StandardizedBatch,
    i: usize,
    j: usize,
    zeta: Var,
    cfg: &KernelConfig,
) -> Result<DensityGrid> {
    check_pair(batch, i, j)?;
    let points = cfg.grid_points();
    let fk = factor_kernels(g, batch, i, &points, cfg)?;
    let terms = pair_terms(g, batch, &fk, j, zeta, cfg)?;
    Ok(DensityGrid {
        points,
        values: terms.joint_partial,
        spacing: cfg.spacing(),
        kind: DensityKind::JointPartial,
    })
}

/// `∂p(z_i | z_j = ζ_m)/∂z_i = ∂p(z_i, ζ_m)/∂z_i / p(ζ_m)` on the grid (`K × M`).
pub fn conditional_derivative(
    g: &mut Graph,
    batch: &StandardizedBatch,
    i: usize,
    j: usize,
    zeta: Var,
    cfg: &KernelConfig,
) -> Result<DensityGrid> {
    check_pair(batch, i, j)?;
    let points = cfg.grid_points();
    let fk = factor_kernels(g, batch, i, &points, cfg)?;
    conditional_derivative_from_kernels(g, batch, &fk, points, j, zeta, cfg)
}

pub fn conditional_derivative_from_kernels(
    g: &mut Graph,
    batch: &StandardizedBatch,
    fk_i: &FactorKernels,
    points: Vec<f64>,
    j: usize,
    zeta: Var,
    cfg: &KernelConfig,
) -> Result<DensityGrid> {
    let terms = pair_terms(g, batch, fk_i, j, zeta, cfg)?;
    if let Some((m, &density)) = g
        .value(terms.conditioning_density)
        .iter()
        .enumerate()
        .find(|(_, &p)| p < EPS)
    {
        return Err(Error::ConditioningValue { m, density });
    }
    let shape = g.shape(terms.joint_partial).to_vec();
    let guarded = g.shift(terms.conditioning_density, EPS);
    let denom = g.broadcast(guarded, &shape)?;
    let values = g.div(terms.joint_partial, denom)?;
    Ok(DensityGrid {
        points,
        values,
        spacing: cfg.spacing(),
        kind: DensityKind::ConditionalDerivative,
    })
}

/// `((b − a)/K) Σ_g f(t_g)` for a `K × 1` (or `K`) grid.
pub fn integrate(g: &mut Graph, grid: &DensityGrid) -> Var {
    let s = g.sum(grid.values);
    g.scale(s, grid.spacing)
}

/// Column-wise integral of a `K × M` grid, shape `1 × M`.
pub fn integrate_columns(g: &mut Graph, grid: &DensityGrid) -> Result<Var> {
    let s = g.sum_axis(grid.values, 0)?;
    Ok(g.scale(s, grid.spacing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn batch_of(g: &mut Graph, data: Vec<f64>, n: usize, d: usize) -> StandardizedBatch {
        let v = g.variable(data, &[n, d]).unwrap();
        StandardizedBatch::assume_standardized(g, v).unwrap()
    }

    fn one_sample(g: &mut Graph, at: f64) -> f64 {
        let b = batch_of(g, vec![0.0], 1, 1);
        let cfg = KernelConfig {
            sigma: 1.0,
            ..KernelConfig::default()
        };
        let v = marginal_pdf_at(g, &b, 0, &[at], &cfg).unwrap();
        g.value(v)[0]
    }

    #[test]
    fn grid_is_left_endpoints() {
        let cfg = KernelConfig::default();
        let p = cfg.grid_points();
        assert_eq!(p.len(), 100);
        assert_eq!(p[0], -5.0);
        assert_abs_diff_eq!(p[99], 4.9, epsilon = 1e-12);
        assert_abs_diff_eq!(cfg.spacing(), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn config_validation() {
        let bad = [
            KernelConfig {
                sigma: 0.0,
                ..Default::default()
            },
            KernelConfig {
                grid_a: 1.0,
                grid_b: 1.0,
                ..Default::default()
            },
            KernelConfig {
                grid_k: 1,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
        assert!(KernelConfig::default().validate().is_ok());
    }

    #[test]
    fn standardize_two_points() {
        let mut g = Graph::new();
        let x = g.variable(vec![0.0, 2.0], &[2, 1]).unwrap();
        let s = standardize(&mut g, x).unwrap();
        assert_eq!(g.value(s.values), &[-1.0, 1.0]);
        assert_eq!(s.means, vec![1.0]);
        assert_eq!(s.stds, vec![1.0]);
    }

    #[test]
    fn standardize_three_points_population() {
        let mut g = Graph::new();
        let x = g.variable(vec![1.0, 2.0, 3.0], &[3, 1]).unwrap();
        let s = standardize(&mut g, x).unwrap();
        let r = (1.5f64).sqrt();
        let v = g.value(s.values);
        assert_abs_diff_eq!(v[0], -r, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[2], r, epsilon = 1e-12);
        assert_abs_diff_eq!(s.stds[0], (2.0f64 / 3.0).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn standardize_is_idempotent() {
        let mut g = Graph::new();
        let r = (1.5f64).sqrt();
        let x = g.variable(vec![-r, 0.0, r], &[3, 1]).unwrap();
        let s = standardize(&mut g, x).unwrap();
        for (a, b) in g.value(s.values).iter().zip([-r, 0.0, r]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn standardize_rejects_constant_column() {
        let mut g = Graph::new();
        let x = g.variable(vec![1.0, 5.0, 1.0, 6.0, 1.0, 7.0], &[3, 2]).unwrap();
        match standardize(&mut g, x) {
            Err(Error::DegenerateFactor { column: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_kernel_values() {
        let mut g = Graph::new();
        assert_abs_diff_eq!(one_sample(&mut g, 0.0), 0.398942, epsilon = 1e-6);
        assert_abs_diff_eq!(one_sample(&mut g, 1.0), 0.241971, epsilon = 1e-6);
    }

    #[test]
    fn single_kernel_derivative() {
        let mut g = Graph::new();
        let b = batch_of(&mut g, vec![0.0], 1, 1);
        let cfg = KernelConfig {
            sigma: 1.0,
            ..Default::default()
        };
        let fk = factor_kernels(&mut g, &b, 0, &[0.0, 1.0], &cfg).unwrap();
        let d = derivative_from_kernels(&mut g, &fk, vec![0.0, 1.0], &cfg).unwrap();
        let v = g.value(d.values);
        assert_eq!(v[0], 0.0);
        assert_abs_diff_eq!(v[1], -0.241971, epsilon = 1e-6);
    }

    #[test]
    fn three_sample_mass() {
        let mut g = Graph::new();
        let b = batch_of(&mut g, vec![-1.0, 0.0, 1.0], 3, 1);
        let cfg = KernelConfig {
            sigma: 0.5,
            ..Default::default()
        };
        let p = marginal_pdf(&mut g, &b, 0, &cfg).unwrap();
        let mass = integrate(&mut g, &p);
        assert_abs_diff_eq!(g.scalar(mass), 1.0, epsilon = 1e-3);
    }

    #[test]
    fn derivative_matches_finite_difference_of_density() {
        let mut g = Graph::new();
        let b = batch_of(&mut g, vec![-1.0, 0.0, 1.0], 3, 1);
        let cfg = KernelConfig {
            sigma: 0.5,
            ..Default::default()
        };
        let d = marginal_pdf_derivative(&mut g, &b, 0, &cfg).unwrap();
        let h = 1e-5;
        let up: Vec<f64> = d.points.iter().map(|p| p + h).collect();
        let down: Vec<f64> = d.points.iter().map(|p| p - h).collect();
        let pu = marginal_pdf_at(&mut g, &b, 0, &up, &cfg).unwrap();
        let pd = marginal_pdf_at(&mut g, &b, 0, &down, &cfg).unwrap();
        for t in 0..d.points.len() {
            let fd = (g.value(pu)[t] - g.value(pd)[t]) / (2.0 * h);
            assert_abs_diff_eq!(g.value(d.values)[t], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn joint_partial_single_sample() {
        let mut g = Graph::new();
        let b = batch_of(&mut g, vec![0.0, 0.0], 1, 2);
        let cfg = KernelConfig {
            sigma: 1.0,
            grid_a: 0.0,
            grid_b: 2.0,
            grid_k: 2,
        };
        let zeta = g.constant(vec![0.0], &[1, 1]).unwrap();
        let jp = joint_pdf_partial(&mut g, &b, 0, 1, zeta, &cfg).unwrap();
        let v = g.value(jp.values);
        assert_eq!(v[0], 0.0);
        let expected = -(-0.5f64).exp() / (2.0 * PI);
        assert_abs_diff_eq!(expected, -0.096532, epsilon = 1e-6);
        assert_abs_diff_eq!(v[1], expected, epsilon = 1e-12);

        let cd = conditional_derivative(&mut g, &b, 0, 1, zeta, &cfg).unwrap();
        assert_abs_diff_eq!(g.value(cd.values)[1], -0.241971, epsilon = 1e-6);
    }

    #[test]
    fn pair_with_itself_rejected() {
        let mut g = Graph::new();
        let b = batch_of(&mut g, vec![0.0, 1.0, 2.0, 3.0], 2, 2);
        let zeta = g.constant(vec![0.0], &[1, 1]).unwrap();
        let cfg = KernelConfig::default();
        assert!(joint_pdf_partial(&mut g, &b, 1, 1, zeta, &cfg).is_err());
    }

    #[test]
    fn integrate_constants() {
        let mut g = Graph::new();
        let cfg = KernelConfig::default();
        for (c, expected) in [(1.0, 10.0), (0.0, 0.0)] {
            let v = g.constant(vec![c; 100], &[100, 1]).unwrap();
            let grid = DensityGrid {
                points: cfg.grid_points(),
                values: v,
                spacing: cfg.spacing(),
                kind: DensityKind::Marginal,
            };
            let s = integrate(&mut g, &grid);
            assert_abs_diff_eq!(g.scalar(s), expected, epsilon = 1e-12);
        }
        let normal: Vec<f64> = cfg.grid_points().iter().map(|&t| gaussian(t, 1.0)).collect();
        let v = g.constant(normal, &[100, 1]).unwrap();
        let grid = DensityGrid {
            points: cfg.grid_points(),
            values: v,
            spacing: cfg.spacing(),
            kind: DensityKind::Marginal,
        };
        let s = integrate(&mut g, &grid);
        assert_abs_diff_eq!(g.scalar(s), 1.0, epsilon = 1e-3);
    }

    #[test]
    fn csv_layout() {
        let mut g = Graph::new();
        let b = batch_of(&mut g, vec![0.0], 1, 1);
        let cfg = KernelConfig {
            sigma: 1.0,
            grid_a: 0.0,
            grid_b: 1.0,
            grid_k: 2,
        };
        let p = marginal_pdf(&mut g, &b, 0, &cfg).unwrap();
        let csv = p.to_csv(&g);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "grid_point,value");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0.0000000000000000e0,3.9894228040143"));
    }
}
