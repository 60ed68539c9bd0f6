//! The Cliff loss: a univariate "peakiness" term on marginal derivative
//! magnitudes, a bivariate divergence between conditional derivative profiles,
//! and a KL term that keeps each factor spread over the uniform support.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::{
    conditional_derivative_from_kernels, factor_kernels, marginal_pdf_at, standardize, DensityGrid,
    DensityKind, FactorKernels, KernelConfig, StandardizedBatch,
};
use crate::diffgraph::{Graph, Var, EPS};
use crate::error::{Error, Result};

/// Half-width of the zero-mean, unit-variance uniform distribution.
pub const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    #[default]
    Jsd,
    /// Mean squared Hellinger distance of each profile to the mixture.
    Hellinger,
}

/// Where the conditioning values ζ come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningPolicy {
    #[default]
    RandomFromBatch,
    FirstRows,
}

/// Evaluation points of the expectation under the uniform in the KL term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlPoints {
    /// Midpoints of `K` equal cells of `[−√3, √3]`.
    #[default]
    Midpoints,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliffWeights {
    pub lambda_uni: f64,
    pub lambda_biv: f64,
    pub lambda_kl_uni: f64,
    pub m_conditioning: usize,
    pub kernel: KernelConfig,
    pub divergence: Divergence,
    pub conditioning: ConditioningPolicy,
    pub kl_points: KlPoints,
}

impl Default for CliffWeights {
    fn default() -> Self {
        CliffWeights {
            lambda_uni: 0.0,
            lambda_biv: 1.0,
            lambda_kl_uni: 1.0,
            m_conditioning: 20,
            kernel: KernelConfig::default(),
            divergence: Divergence::Jsd,
            conditioning: ConditioningPolicy::RandomFromBatch,
            kl_points: KlPoints::Midpoints,
        }
    }
}

impl CliffWeights {
    pub fn with_lambdas(lambda_uni: f64, lambda_biv: f64, lambda_kl_uni: f64) -> Self {
        CliffWeights {
            lambda_uni,
            lambda_biv,
            lambda_kl_uni,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_uni, self.lambda_biv, self.lambda_kl_uni];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and ≥ 0, got {lambdas:?}"
            )));
        }
        if lambdas.iter().all(|&l| l == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if self.m_conditioning == 0 {
            return Err(Error::Config("m_conditioning must be ≥ 1".into()));
        }
        self.kernel.validate()
    }
}

/// Kernel evaluations attributed to each loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermKernelEvals {
    /// One-dimensional kernels of the factor samples on the grid.
    pub uni: u64,
    /// Product kernels in the pairwise joint partial derivatives.
    pub biv: u64,
    /// One-dimensional kernels at the uniform evaluation points.
    pub kl_uni: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CliffLossReport {
    pub l_uni: f64,
    pub l_biv: f64,
    pub l_kl_uni: f64,
    pub total: f64,
    pub per_factor_entropy: Vec<f64>,
    pub per_factor_kl: Vec<f64>,
    /// `per_pair_jsd[i][j]` is the divergence of factor `i` conditioned on `j`;
    /// the diagonal is zero.
    pub per_pair_jsd: Vec<Vec<f64>>,
    pub kernel_evals: TermKernelEvals,
}

impl CliffLossReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report is plain data")
    }
}

/// Differentiable handles to every term of one loss evaluation.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub uni: Var,
    pub biv: Option<Var>,
    pub kl_uni: Var,
    pub per_factor_entropy: Vec<Var>,
    pub per_factor_kl: Vec<Var>,
    pub per_pair: Vec<((usize, usize), Var)>,
    pub kernel_evals: TermKernelEvals,
}

#[derive(Clone, Debug)]
pub struct CliffLoss {
    pub total: Var,
    pub terms: LossTerms,
    pub batch: StandardizedBatch,
    pub report: CliffLossReport,
}

/// `s_i = |dp/dz_i| / ∫|dp/dz_i|` from precomputed kernels.
fn normalized_magnitude_from(
    g: &mut Graph,
    fk: &FactorKernels,
    i: usize,
    cfg: &KernelConfig,
) -> Result<DensityGrid> {
    let deriv = g.mean_axis(fk.derivative, 1)?;
    let mag = g.abs(deriv);
    let s = g.sum(mag);
    let c = g.scale(s, cfg.spacing());
    let mass = g.scalar(c);
    if !(mass >= EPS) {
        return Err(Error::DegenerateDensity { factor: i, mass });
    }
    let shape = g.shape(mag).to_vec();
    let guarded = g.shift(c, EPS);
    let denom = g.broadcast(guarded, &shape)?;
    let values = g.div(mag, denom)?;
    Ok(DensityGrid {
        points: cfg.grid_points(),
        values,
        spacing: cfg.spacing(),
        kind: DensityKind::ConditionalDerivativeMagnitude,
    })
}

pub fn normalized_derivative_magnitude(
    g: &mut Graph,
    batch: &StandardizedBatch,
    i: usize,
    cfg: &KernelConfig,
) -> Result<DensityGrid> {
    let fk = factor_kernels(g, batch, i, &cfg.grid_points(), cfg)?;
    normalized_magnitude_from(g, &fk, i, cfg)
}

/// Entropy of each column of a `K × M` tabulated density, shape `1 × M`.
fn column_entropies(g: &mut Graph, values: Var, spacing: f64) -> Result<Var> {
    let logs = g.log_eps(values, EPS)?;
    let plogp = g.mul(values, logs)?;
    let s = g.sum_axis(plogp, 0)?;
    Ok(g.scale(s, -spacing))
}

/// `−Σ_g h·v_g·log(v_g + ε)`.
pub fn differential_entropy(g: &mut Graph, density: &DensityGrid) -> Result<Var> {
    let logs = g.log_eps(density.values, EPS)?;
    let plogp = g.mul(density.values, logs)?;
    let s = g.sum(plogp);
    Ok(g.scale(s, -density.spacing))
}

fn build_kernels(g: &mut Graph, batch: &StandardizedBatch, cfg: &KernelConfig) -> Result<Vec<FactorKernels>> {
    let points = cfg.grid_points();
    (0..batch.d)
        .map(|i| factor_kernels(g, batch, i, &points, cfg))
        .collect()
}

fn uni_from_kernels(g: &mut Graph, kernels: &[FactorKernels], cfg: &KernelConfig) -> Result<(Var, Vec<Var>)> {
    let mut per_factor = Vec::with_capacity(kernels.len());
    for (i, fk) in kernels.iter().enumerate() {
        let s = normalized_magnitude_from(g, fk, i, cfg)?;
        per_factor.push(differential_entropy(g, &s)?);
    }
    let total = sum_scalars(g, &per_factor)?;
    Ok((total, per_factor))
}

fn sum_scalars(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    match parts {
        [] => Ok(g.scalar_constant(0.0)),
        [first, rest @ ..] => rest.iter().try_fold(*first, |acc, &p| g.add(acc, p)),
    }
}

/// `Σ_i H(s_i)` over all factors.
pub fn loss_uni(g: &mut Graph, batch: &StandardizedBatch, cfg: &KernelConfig) -> Result<Var> {
    let kernels = build_kernels(g, batch, cfg)?;
    Ok(uni_from_kernels(g, &kernels, cfg)?.0)
}

/// Divergence among the columns of `u` (`K × M`, nonnegative) after each is
/// normalised to unit mass. A column with no mass is reported by index.
pub fn divergence_of_profiles(
    g: &mut Graph,
    u: Var,
    spacing: f64,
    divergence: Divergence,
) -> std::result::Result<Var, (usize, f64, Error)> {
    let wrap = |e: Error| (0, 0.0, e);
    let shape = g.shape(u).to_vec();
    let s = g.sum_axis(u, 0).map_err(wrap)?;
    let mass = g.scale(s, spacing);
    if let Some((m, &v)) = g.value(mass).iter().enumerate().find(|(_, &v)| !(v >= EPS)) {
        return Err((m, v, Error::Spec("flat conditional profile".into())));
    }
    let guarded = g.shift(mass, EPS);
    let denom = g.broadcast(guarded, &shape).map_err(wrap)?;
    let p = g.div(u, denom).map_err(wrap)?;
    let mix = g.mean_axis(p, 1).map_err(wrap)?;
    match divergence {
        Divergence::Jsd => {
            let h_mix = column_entropies(g, mix, spacing).map_err(wrap)?;
            let h_cols = column_entropies(g, p, spacing).map_err(wrap)?;
            let h_mean = g.mean(h_cols);
            let h_mix = g.sum(h_mix);
            g.sub(h_mix, h_mean).map_err(wrap)
        }
        Divergence::Hellinger => {
            let sp = g.shift(p, EPS);
            let rp = g.sqrt(sp).map_err(wrap)?;
            let sm = g.shift(mix, EPS);
            let rm = g.sqrt(sm).map_err(wrap)?;
            let rmb = g.broadcast(rm, &shape).map_err(wrap)?;
            let diff = g.sub(rp, rmb).map_err(wrap)?;
            let sq = g.square(diff);
            let per_col = g.sum_axis(sq, 0).map_err(wrap)?;
            let mean = g.mean(per_col);
            Ok(g.scale(mean, 0.5 * spacing))
        }
    }
}

fn pair_divergence(
    g: &mut Graph,
    batch: &StandardizedBatch,
    fk_i: &FactorKernels,
    (i, j): (usize, usize),
    rows: &[usize],
    cfg: &KernelConfig,
    divergence: Divergence,
) -> Result<Var> {
    let zeta = batch.conditioning_values(g, j, rows)?;
    let cond = conditional_derivative_from_kernels(g, batch, fk_i, cfg.grid_points(), j, zeta, cfg)?;
    let u = g.abs(cond.values);
    divergence_of_profiles(g, u, cfg.spacing(), divergence).map_err(|(m, mass, e)| match e {
        Error::Spec(_) => Error::DegenerateConditional { i, j, m, mass },
        other => other,
    })
}

/// Generalised JSD among the conditional derivative profiles of factor `i`
/// given factor `j` at each conditioning value.
pub fn jsd_pairwise(
    g: &mut Graph,
    batch: &StandardizedBatch,
    i: usize,
    j: usize,
    rows: &[usize],
    cfg: &KernelConfig,
) -> Result<Var> {
    if i == j || i >= batch.d || j >= batch.d {
        return Err(Error::Dimension(format!(
            "ordered pair ({i}, {j}) of a {}-factor batch",
            batch.d
        )));
    }
    let fk = factor_kernels(g, batch, i, &cfg.grid_points(), cfg)?;
    pair_divergence(g, batch, &fk, (i, j), rows, cfg, Divergence::Jsd)
}

fn biv_from_kernels(
    g: &mut Graph,
    batch: &StandardizedBatch,
    kernels: &[FactorKernels],
    rows: &[usize],
    cfg: &KernelConfig,
    divergence: Divergence,
) -> Result<(Var, Vec<((usize, usize), Var)>)> {
    let mut per_pair = Vec::with_capacity(batch.d * batch.d.saturating_sub(1));
    for i in 0..batch.d {
        for j in (0..batch.d).filter(|&j| j != i) {
            let v = pair_divergence(g, batch, &kernels[i], (i, j), rows, cfg, divergence)?;
            per_pair.push(((i, j), v));
        }
    }
    let parts: Vec<Var> = per_pair.iter().map(|p| p.1).collect();
    Ok((sum_scalars(g, &parts)?, per_pair))
}

/// `Σ_i Σ_{j≠i}` of the pairwise divergence, conditioning on `rows` of the batch.
pub fn loss_biv(
    g: &mut Graph,
    batch: &StandardizedBatch,
    weights: &CliffWeights,
    rows: &[usize],
) -> Result<Var> {
    if batch.d < 2 {
        return Err(Error::Dimension("the bivariate term needs d ≥ 2".into()));
    }
    check_rows(batch, rows)?;
    let kernels = build_kernels(g, batch, &weights.kernel)?;
    Ok(biv_from_kernels(g, batch, &kernels, rows, &weights.kernel, weights.divergence)?.0)
}

/// Evaluation points of the uniform expectation.
pub fn kl_points<R: Rng + ?Sized>(mode: KlPoints, k: usize, rng: &mut R) -> Vec<f64> {
    match mode {
        KlPoints::Midpoints => {
            let h = 2.0 * SQRT3 / k as f64;
            (0..k).map(|t| -SQRT3 + (t as f64 + 0.5) * h).collect()
        }
        KlPoints::Random => (0..k).map(|_| rng.random_range(-SQRT3..SQRT3)).collect(),
    }
}

/// `Σ_i [−log(2√3) − mean_t log p(z_i = t)]` over the uniform evaluation points.
pub fn loss_kl_uni(
    g: &mut Graph,
    batch: &StandardizedBatch,
    cfg: &KernelConfig,
    points: &[f64],
) -> Result<Var> {
    Ok(kl_terms(g, batch, cfg, points)?.0)
}

fn kl_terms(
    g: &mut Graph,
    batch: &StandardizedBatch,
    cfg: &KernelConfig,
    points: &[f64],
) -> Result<(Var, Vec<Var>)> {
    if points.is_empty() {
        return Err(Error::Config(
            "the KL term needs at least one evaluation point".into(),
        ));
    }
    let neg_entropy = -(2.0 * SQRT3).ln();
    let mut per_factor = Vec::with_capacity(batch.d);
    for i in 0..batch.d {
        let p = marginal_pdf_at(g, batch, i, points, cfg)?;
        let logp = g.log_eps(p, EPS)?;
        let mean = g.mean(logp);
        let neg = g.neg(mean);
        per_factor.push(g.shift(neg, neg_entropy));
    }
    Ok((sum_scalars(g, &per_factor)?, per_factor))
}

fn check_rows(batch: &StandardizedBatch, rows: &[usize]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Config("at least one conditioning row is required".into()));
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= batch.n) {
        return Err(Error::Dimension(format!(
            "conditioning row {r} of a {}-row batch",
            batch.n
        )));
    }
    Ok(())
}

/// Rows whose values serve as conditioning points.
pub fn conditioning_rows<R: Rng + ?Sized>(
    policy: ConditioningPolicy,
    n: usize,
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return Err(Error::Config(format!(
            "need 1 ≤ M ≤ n conditioning rows, got M = {m}, n = {n}"
        )));
    }
    Ok(match policy {
        ConditioningPolicy::RandomFromBatch => index::sample(rng, n, m).into_vec(),
        ConditioningPolicy::FirstRows => (0..m).collect(),
    })
}

/// Every term on an already standardized batch. The bivariate term is absent
/// when `d = 1`.
pub fn loss_terms(
    g: &mut Graph,
    batch: &StandardizedBatch,
    weights: &CliffWeights,
    rows: &[usize],
    kl_eval_points: &[f64],
) -> Result<LossTerms> {
    let cfg = &weights.kernel;
    let start = g.kernel_evals();
    let kernels = build_kernels(g, batch, cfg)?;
    let after_kernels = g.kernel_evals();
    let (uni, per_factor_entropy) = uni_from_kernels(g, &kernels, cfg)?;

    let before_biv = g.kernel_evals();
    let (biv, per_pair) = if batch.d >= 2 {
        check_rows(batch, rows)?;
        let (v, pairs) = biv_from_kernels(g, batch, &kernels, rows, cfg, weights.divergence)?;
        (Some(v), pairs)
    } else {
        (None, Vec::new())
    };
    let after_biv = g.kernel_evals();

    let (kl_uni, per_factor_kl) = kl_terms(g, batch, cfg, kl_eval_points)?;
    let after_kl = g.kernel_evals();

    let kernel_evals = TermKernelEvals {
        uni: (after_kernels - start).one_d,
        biv: (after_biv - before_biv).two_d,
        kl_uni: (after_kl - after_biv).one_d,
    };
    Ok(LossTerms {
        uni,
        biv,
        kl_uni,
        per_factor_entropy,
        per_factor_kl,
        per_pair,
        kernel_evals,
    })
}

fn weighted_total(g: &mut Graph, terms: &LossTerms, weights: &CliffWeights) -> Result<Var> {
    let mut parts = Vec::with_capacity(3);
    if weights.lambda_uni != 0.0 {
        parts.push(g.scale(terms.uni, weights.lambda_uni));
    }
    if let (Some(biv), true) = (terms.biv, weights.lambda_biv != 0.0) {
        parts.push(g.scale(biv, weights.lambda_biv));
    }
    if weights.lambda_kl_uni != 0.0 {
        parts.push(g.scale(terms.kl_uni, weights.lambda_kl_uni));
    }
    sum_scalars(g, &parts)
}

fn report(g: &Graph, terms: &LossTerms, total: Var, d: usize) -> Result<CliffLossReport> {
    let mut per_pair_jsd = vec![vec![0.0; d]; d];
    for &((i, j), v) in &terms.per_pair {
        per_pair_jsd[i][j] = g.scalar(v);
    }
    let r = CliffLossReport {
        l_uni: g.scalar(terms.uni),
        l_biv: terms.biv.map_or(0.0, |v| g.scalar(v)),
        l_kl_uni: g.scalar(terms.kl_uni),
        total: g.scalar(total),
        per_factor_entropy: terms.per_factor_entropy.iter().map(|&v| g.scalar(v)).collect(),
        per_factor_kl: terms.per_factor_kl.iter().map(|&v| g.scalar(v)).collect(),
        per_pair_jsd,
        kernel_evals: terms.kernel_evals,
    };
    for (name, v) in [
        ("l_uni", r.l_uni),
        ("l_biv", r.l_biv),
        ("l_kl_uni", r.l_kl_uni),
        ("total", r.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss term {name} = {v}"),
                coordinate: 0,
            });
        }
    }
    Ok(r)
}

/// Standardizes `raw` (`n × d`) and evaluates the weighted loss with fixed
/// conditioning rows and KL evaluation points.
pub fn total_loss_with(
    g: &mut Graph,
    raw: Var,
    weights: &CliffWeights,
    rows: &[usize],
    kl_eval_points: &[f64],
) -> Result<CliffLoss> {
    weights.validate()?;
    let batch = standardize(g, raw)?;
    let terms = loss_terms(g, &batch, weights, rows, kl_eval_points)?;
    let total = weighted_total(g, &terms, weights)?;
    let report = report(g, &terms, total, batch.d)?;
    Ok(CliffLoss {
        total,
        terms,
        batch,
        report,
    })
}

/// [`total_loss_with`] drawing conditioning rows (and random KL points, if
/// configured) from `rng`.
pub fn total_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    raw: Var,
    weights: &CliffWeights,
    rng: &mut R,
) -> Result<CliffLoss> {
    weights.validate()?;
    let (n, d) = match g.shape(raw) {
        [n, d] => (*n, *d),
        s => {
            return Err(Error::InvalidShape {
                op: "total_loss",
                detail: format!("expected n×d, got {s:?}"),
            })
        }
    };
    let rows = if d >= 2 {
        conditioning_rows(weights.conditioning, n, weights.m_conditioning, rng)?
    } else {
        Vec::new()
    };
    let points = kl_points(weights.kl_points, weights.kernel.grid_k, rng);
    total_loss_with(g, raw, weights, &rows, &points)
}

/// Kernel evaluations the loss is expected to perform for a given shape.
pub fn expected_kernel_evals(d: usize, n: usize, weights: &CliffWeights) -> TermKernelEvals {
    let (k, m) = (weights.kernel.grid_k as u64, weights.m_conditioning as u64);
    let (d, n) = (d as u64, n as u64);
    TermKernelEvals {
        uni: d * k * n,
        biv: if d >= 2 { d * (d - 1) * m * k * n } else { 0 },
        kl_uni: d * k * n,
    }
}

impl std::ops::Sub for TermKernelEvals {
    type Output = TermKernelEvals;
    fn sub(self, rhs: Self) -> Self {
        TermKernelEvals {
            uni: self.uni - rhs.uni,
            biv: self.biv - rhs.biv,
            kl_uni: self.kl_uni - rhs.kl_uni,
        }
    }
}
