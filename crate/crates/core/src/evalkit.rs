//! Evaluation of recovered factors: Spearman MCC under the best assignment,
//! cliff-threshold detection, quantized agreement up to permutation and
//! reversal, and loss landscapes over projection angles.

use itertools::Itertools;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criterion::{conditioning_rows, kl_points, total_loss_with, CliffWeights};
use crate::density::{marginal_pdf_at, standardize, KernelConfig};
use crate::diffgraph::Graph;
use crate::error::{Error, Result};
use crate::io::fmt_float;
use crate::matrix::Matrix;
use crate::synthdata::{true_quantize, GridDensitySpec};
use crate::trainer::zeta_rng;

/// Exhaustive assignment search bound.
pub const MAX_FACTORS: usize = 8;

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero rank variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of average-tie ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "spearman on {} and {} values",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::Dimension("spearman needs n ≥ 3".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MccReport {
    /// `corr[i][j] = |ρ(true_i, recovered_j)|`.
    pub corr: Vec<Vec<f64>>,
    /// `assignment[i]` is the recovered factor matched to true factor `i`.
    pub assignment: Vec<usize>,
    pub signs: Vec<i8>,
    /// Mean matched correlation on a 0–100 scale.
    pub mcc: f64,
    pub warnings: Vec<String>,
}

fn check_factor_count(d: usize) -> Result<()> {
    if d == 0 {
        return Err(Error::Dimension("no factors".into()));
    }
    if d > MAX_FACTORS {
        return Err(Error::TooManyFactors { d, max: MAX_FACTORS });
    }
    Ok(())
}

/// Permutation maximising `Σ_i score[i][perm[i]]`, first found on ties.
fn best_permutation(score: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let d = score.len();
    let mut best = ((0..d).collect::<Vec<_>>(), f64::NEG_INFINITY);
    for perm in (0..d).permutations(d) {
        let s: f64 = perm.iter().enumerate().map(|(i, &j)| score[i][j]).sum();
        if s > best.1 {
            best = (perm, s);
        }
    }
    best
}

pub fn mcc(true_z: &Matrix, recovered: &Matrix) -> Result<MccReport> {
    if true_z.rows != recovered.rows || true_z.cols != recovered.cols {
        return Err(Error::Dimension(format!(
            "true factors {}×{} vs recovered {}×{}",
            true_z.rows, true_z.cols, recovered.rows, recovered.cols
        )));
    }
    let d = true_z.cols;
    check_factor_count(d)?;
    let (tc, rc) = (true_z.columns(), recovered.columns());
    let t_ranks: Vec<Vec<f64>> = tc.iter().map(|c| average_ranks(c)).collect();
    let r_ranks: Vec<Vec<f64>> = rc.iter().map(|c| average_ranks(c)).collect();
    if true_z.rows < 3 {
        return Err(Error::Dimension("spearman needs n ≥ 3".into()));
    }
    let mut warnings = Vec::new();
    let mut raw = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            raw[i][j] = match pearson(&t_ranks[i], &r_ranks[j]) {
                Ok(r) => r,
                Err(_) => {
                    warnings.push(format!(
                        "constant column in pair ({i}, {j}); correlation set to 0"
                    ));
                    0.0
                }
            };
        }
    }
    let corr: Vec<Vec<f64>> = raw.iter().map(|r| r.iter().map(|v| v.abs()).collect()).collect();
    let (assignment, total) = best_permutation(&corr);
    let signs = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| if raw[i][j] < 0.0 { -1 } else { 1 })
        .collect();
    Ok(MccReport {
        corr,
        assignment,
        signs,
        mcc: 100.0 * total / d as f64,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorThresholds {
    /// Standardized locations, sorted.
    pub thresholds: Vec<f64>,
    /// `|dp/dz|` at each location.
    pub heights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedThresholds {
    pub factors: Vec<FactorThresholds>,
    /// Standardization applied before detection.
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub kernel: KernelConfig,
    /// Minimum peak prominence as a fraction of the factor's largest `|dp/dz|`.
    pub min_prominence: f64,
    /// Support-edge filter: the density `edge_offset` kernel widths to each
    /// side of a peak must be at least this fraction of the largest density.
    pub min_side_density: f64,
    pub edge_offset: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            kernel: KernelConfig {
                grid_k: 400,
                ..KernelConfig::default()
            },
            min_prominence: 0.3,
            min_side_density: 0.02,
            edge_offset: 3.0,
        }
    }
}

/// Topographic prominence of every strict local maximum of `v`.
pub fn peak_prominences(v: &[f64]) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for k in 1..v.len().saturating_sub(1) {
        // plateaus count once, at their left end
        if !(v[k] > v[k - 1]) {
            continue;
        }
        let mut r = k + 1;
        while r < v.len() && v[r] == v[k] {
            r += 1;
        }
        if r == v.len() || v[r] > v[k] {
            continue;
        }
        let side_min = |range: &mut dyn Iterator<Item = usize>| {
            let mut lowest = v[k];
            for t in range {
                if v[t] > v[k] {
                    break;
                }
                lowest = lowest.min(v[t]);
            }
            lowest
        };
        let left = side_min(&mut (0..k).rev());
        let right = side_min(&mut (k + 1..v.len()));
        out.push((k, v[k] - left.max(right)));
    }
    out
}

/// Cliff locations per factor: prominent maxima of `|dp/dz|` that are not
/// the edges of the support.
pub fn detect_thresholds(recovered: &Matrix, cfg: &DetectorConfig) -> Result<DetectedThresholds> {
    cfg.kernel.validate()?;
    let mut g = Graph::new();
    let raw = g.constant(recovered.data.clone(), &[recovered.rows, recovered.cols])?;
    let batch = standardize(&mut g, raw)?;
    let points = cfg.kernel.grid_points();
    let sigma = cfg.kernel.sigma;
    let mut factors = Vec::with_capacity(batch.d);
    for i in 0..batch.d {
        let fk = crate::density::factor_kernels(&mut g, &batch, i, &points, &cfg.kernel)?;
        let d = g.mean_axis(fk.derivative, 1)?;
        let mag: Vec<f64> = g.value(d).iter().map(|v| v.abs()).collect();
        let p = marginal_pdf_at(&mut g, &batch, i, &points, &cfg.kernel)?;
        let p_max = g.value(p).iter().cloned().fold(0.0, f64::max);
        let global = mag.iter().cloned().fold(0.0, f64::max);
        let candidates: Vec<(usize, f64)> = peak_prominences(&mag)
            .into_iter()
            .filter(|&(_, prom)| prom >= cfg.min_prominence * global)
            .collect();
        let sides: Vec<f64> = candidates
            .iter()
            .flat_map(|&(k, _)| {
                [
                    points[k] - cfg.edge_offset * sigma,
                    points[k] + cfg.edge_offset * sigma,
                ]
            })
            .collect();
        let side_density = marginal_pdf_at(&mut g, &batch, i, &sides, &cfg.kernel)?;
        let side = g.value(side_density).to_vec();
        let mut found = FactorThresholds {
            thresholds: Vec::new(),
            heights: Vec::new(),
        };
        for (c, &(k, _)) in candidates.iter().enumerate() {
            if side[2 * c].min(side[2 * c + 1]) >= cfg.min_side_density * p_max {
                found.thresholds.push(points[k]);
                found.heights.push(mag[k]);
            }
        }
        factors.push(found);
    }
    Ok(DetectedThresholds {
        factors,
        means: batch.means,
        stds: batch.stds,
    })
}

impl DetectedThresholds {
    pub fn counts(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.thresholds.len()).collect()
    }

    /// Bins of `recovered` after the detector's own standardization.
    pub fn quantize(&self, recovered: &Matrix) -> Result<Vec<Vec<usize>>> {
        if recovered.cols != self.factors.len() {
            return Err(Error::Dimension(
                "threshold lists do not match factor count".into(),
            ));
        }
        Ok((0..recovered.rows)
            .map(|r| {
                (0..recovered.cols)
                    .map(|j| {
                        let z = (recovered.get(r, j) - self.means[j]) / self.stds[j];
                        self.factors[j].thresholds.partition_point(|&t| t < z)
                    })
                    .collect()
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub thresholds: Vec<FactorThresholds>,
    pub true_counts: Vec<usize>,
    pub detected_counts: Vec<usize>,
    /// Whether detected counts equal true counts under the matched permutation.
    pub counts_match: bool,
    pub agreement: f64,
    /// `permutation[i]` is the recovered factor matched to true factor `i`.
    pub permutation: Vec<usize>,
    pub reversal: Vec<i8>,
}

/// Best exact-match rate of quantized vectors over permutations and
/// per-factor reversals (`bin → K − bin` for `K` detected thresholds).
pub fn quantized_agreement(
    true_z: &Matrix,
    true_spec: &GridDensitySpec,
    recovered: &Matrix,
    detected: &DetectedThresholds,
) -> Result<ThresholdReport> {
    let d = true_spec.d;
    check_factor_count(d)?;
    if recovered.cols != d || true_z.rows != recovered.rows {
        return Err(Error::Dimension(
            "recovered factors do not match the true factors".into(),
        ));
    }
    let n = true_z.rows;
    let truth = true_quantize(true_z, true_spec)?;
    let rec = detected.quantize(recovered)?;
    let counts = detected.counts();
    let true_counts: Vec<usize> = true_spec.thresholds.iter().map(Vec::len).collect();

    // matches[i][j][s]: rows where true bin i equals recovered bin j under reversal s
    let words = n.div_ceil(64);
    let mut matches = vec![vec![[vec![0u64; words], vec![0u64; words]]; d]; d];
    for r in 0..n {
        for i in 0..d {
            for j in 0..d {
                let b = rec[r][j];
                if truth[r][i] == b {
                    matches[i][j][0][r / 64] |= 1 << (r % 64);
                }
                if truth[r][i] == counts[j] - b {
                    matches[i][j][1][r / 64] |= 1 << (r % 64);
                }
            }
        }
    }
    let mut best = (0usize, (0..d).collect::<Vec<_>>(), vec![1i8; d]);
    for perm in (0..d).permutations(d) {
        for mask in 0..(1usize << d) {
            let mut acc = vec![u64::MAX; words];
            for (i, &j) in perm.iter().enumerate() {
                let s = (mask >> i) & 1;
                acc.iter_mut().zip(&matches[i][j][s]).for_each(|(a, m)| *a &= m);
            }
            if n % 64 != 0 {
                acc[words - 1] &= (1u64 << (n % 64)) - 1;
            }
            let hits: usize = acc.iter().map(|w| w.count_ones() as usize).sum();
            if hits > best.0 {
                let rev = (0..d)
                    .map(|i| if (mask >> i) & 1 == 1 { -1 } else { 1 })
                    .collect();
                best = (hits, perm.clone(), rev);
            }
        }
    }
    let (hits, permutation, reversal) = best;
    let counts_match = permutation
        .iter()
        .enumerate()
        .all(|(i, &j)| counts[j] == true_counts[i]);
    Ok(ThresholdReport {
        thresholds: detected.factors.clone(),
        true_counts,
        detected_counts: counts,
        counts_match,
        agreement: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        permutation,
        reversal,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeRow {
    pub theta1_deg: f64,
    pub theta2_deg: f64,
    pub l_uni: f64,
    pub l_biv: f64,
    pub l_kl_uni: f64,
    pub total: f64,
    /// `θ₁ ≡ θ₂ (mod 180°)`: the projection is not invertible.
    pub singular: bool,
}

pub fn sweep_angles(step_deg: f64) -> Result<Vec<f64>> {
    if !(step_deg > 0.0 && step_deg <= 90.0) {
        return Err(Error::Config(format!(
            "sweep step must lie in (0, 90], got {step_deg}"
        )));
    }
    let count = (180.0 / step_deg - 1e-9).ceil() as usize;
    Ok((0..count).map(|k| k as f64 * step_deg).collect())
}

fn direction(theta_deg: f64) -> Vec<f64> {
    let t = theta_deg.to_radians();
    vec![t.cos(), t.sin()]
}

fn check_two_factors(latents: &Matrix) -> Result<()> {
    if latents.cols != 2 {
        return Err(Error::Dimension(format!(
            "landscape sweeps need 2 factors, got {}",
            latents.cols
        )));
    }
    Ok(())
}

fn evaluate_projection(
    latents: &Matrix,
    w: &[Vec<f64>],
    weights: &CliffWeights,
    rows: &[usize],
    points: &[f64],
) -> Result<(f64, f64, f64, f64)> {
    let z = latents.project(w)?;
    let mut g = Graph::new();
    let raw = g.constant(z.data, &[z.rows, z.cols])?;
    let loss = total_loss_with(&mut g, raw, weights, rows, points)?;
    let r = loss.report;
    Ok((r.l_uni, r.l_biv, r.l_kl_uni, r.total))
}

/// Every loss term at `z' = W z` with `W` rows `(cos θ₁, sin θ₁)` and
/// `(cos θ₂, sin θ₂)` over `[0°, 180°)²`. Conditioning rows and KL points are
/// drawn once from `zeta_seed` and shared by all cells.
pub fn landscape_sweep(
    latents: &Matrix,
    step_deg: f64,
    weights: &CliffWeights,
    zeta_seed: u64,
) -> Result<Vec<LandscapeRow>> {
    check_two_factors(latents)?;
    weights.validate()?;
    let angles = sweep_angles(step_deg)?;
    let mut rng = zeta_rng(zeta_seed);
    let rows = conditioning_rows(
        weights.conditioning,
        latents.rows,
        weights.m_conditioning,
        &mut rng,
    )?;
    let points = kl_points(weights.kl_points, weights.kernel.grid_k, &mut rng);
    let cells: Vec<(f64, f64)> = angles
        .iter()
        .flat_map(|&a| angles.iter().map(move |&b| (a, b)))
        .collect();
    cells
        .par_iter()
        .map(|&(t1, t2)| {
            let (l_uni, l_biv, l_kl_uni, total) =
                evaluate_projection(latents, &[direction(t1), direction(t2)], weights, &rows, &points)?;
            let gap = (t1 - t2).rem_euclid(180.0);
            Ok(LandscapeRow {
                theta1_deg: t1,
                theta2_deg: t2,
                l_uni,
                l_biv,
                l_kl_uni,
                total,
                singular: gap < 1e-9 || 180.0 - gap < 1e-9,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnivariateRow {
    pub theta_deg: f64,
    pub l_uni: f64,
}

/// `l_uni` of the single projection `cos θ·z₁ + sin θ·z₂` over `[0°, 180°)`.
pub fn univariate_sweep(
    latents: &Matrix,
    step_deg: f64,
    kernel: &KernelConfig,
) -> Result<Vec<UnivariateRow>> {
    check_two_factors(latents)?;
    let weights = CliffWeights {
        kernel: kernel.clone(),
        ..CliffWeights::with_lambdas(1.0, 0.0, 0.0)
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let points = kl_points(weights.kl_points, kernel.grid_k, &mut rng);
    sweep_angles(step_deg)?
        .par_iter()
        .map(|&t| {
            let (l_uni, ..) = evaluate_projection(latents, &[direction(t)], &weights, &[], &points)?;
            Ok(UnivariateRow { theta_deg: t, l_uni })
        })
        .collect()
}

pub fn landscape_csv(rows: &[LandscapeRow]) -> String {
    let mut out = String::from("theta1_deg,theta2_deg,l_uni,l_biv,l_kl_uni,total,singular\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            fmt_float(r.theta1_deg),
            fmt_float(r.theta2_deg),
            fmt_float(r.l_uni),
            fmt_float(r.l_biv),
            fmt_float(r.l_kl_uni),
            fmt_float(r.total),
            r.singular
        ));
    }
    out
}

/// Index of the smallest value (first on ties).
pub fn argmin_by<T>(rows: &[T], key: impl Fn(&T) -> f64) -> Option<usize> {
    (0..rows.len()).min_by(|&a, &b| key(&rows[a]).total_cmp(&key(&rows[b])))
}

/// Angular distance modulo `period` degrees.
pub fn angle_distance(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).rem_euclid(period);
    d.min(period - d)
}
