//! Latent factors with a piecewise-constant joint density on an axis-aligned
//! grid, the nonlinear mixing `x = B·tanh(A·(s·z))`, and dataset files.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{matrix_csv, write_atomic};
use crate::matrix::Matrix;

/// Piecewise-constant density on `[0, 1]^d`, constant on the cells cut out by
/// per-factor thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDensitySpec {
    pub d: usize,
    pub thresholds: Vec<Vec<f64>>,
    /// Cell probabilities, row-major over bin indices (last factor fastest).
    pub cell_masses: Vec<f64>,
    /// Smallest allowed density ratio between cells sharing a face.
    pub min_jump: f64,
}

impl GridDensitySpec {
    pub fn new(thresholds: Vec<Vec<f64>>, cell_masses: Vec<f64>, min_jump: f64) -> Result<Self> {
        let spec = GridDensitySpec {
            d: thresholds.len(),
            thresholds,
            cell_masses,
            min_jump,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// One cell covering the whole box.
    pub fn uniform(d: usize) -> Self {
        GridDensitySpec {
            d,
            thresholds: vec![Vec::new(); d],
            cell_masses: vec![1.0],
            min_jump: 1.0,
        }
    }

    pub fn bins_per_factor(&self) -> Vec<usize> {
        self.thresholds.iter().map(|t| t.len() + 1).collect()
    }

    pub fn cell_count(&self) -> usize {
        self.bins_per_factor().iter().product()
    }

    /// Bin edges of factor `i`, including the support ends 0 and 1.
    pub fn edges(&self, i: usize) -> Vec<f64> {
        let mut e = Vec::with_capacity(self.thresholds[i].len() + 2);
        e.push(0.0);
        e.extend(&self.thresholds[i]);
        e.push(1.0);
        e
    }

    pub fn cell_index(&self, bins: &[usize]) -> usize {
        bins.iter()
            .zip(self.bins_per_factor())
            .fold(0, |acc, (&b, k)| acc * k + b)
    }

    pub fn cell_bins(&self, mut index: usize) -> Vec<usize> {
        let per = self.bins_per_factor();
        let mut bins = vec![0; self.d];
        for i in (0..self.d).rev() {
            bins[i] = index % per[i];
            index /= per[i];
        }
        bins
    }

    pub fn cell_volume(&self, bins: &[usize]) -> f64 {
        bins.iter()
            .enumerate()
            .map(|(i, &b)| {
                let e = self.edges(i);
                e[b + 1] - e[b]
            })
            .product()
    }

    pub fn cell_density(&self, index: usize) -> f64 {
        self.cell_masses[index] / self.cell_volume(&self.cell_bins(index))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.thresholds.len() != self.d {
            return Err(Error::Spec(format!(
                "need d ≥ 1 threshold lists, got d = {} with {} lists",
                self.d,
                self.thresholds.len()
            )));
        }
        for (i, t) in self.thresholds.iter().enumerate() {
            let e = self.edges(i);
            if e.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::Spec(format!(
                    "thresholds of factor {i} must be strictly increasing inside (0, 1): {t:?}"
                )));
            }
        }
        if self.cell_masses.len() != self.cell_count() {
            return Err(Error::Spec(format!(
                "{} cell masses for {} cells",
                self.cell_masses.len(),
                self.cell_count()
            )));
        }
        if self.cell_masses.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
            return Err(Error::Spec("cell masses must be positive".into()));
        }
        let total: f64 = self.cell_masses.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Spec(format!("cell masses sum to {total}, not 1")));
        }
        if !(self.min_jump >= 1.0) {
            return Err(Error::Spec(format!(
                "min_jump must be ≥ 1, got {}",
                self.min_jump
            )));
        }
        let per = self.bins_per_factor();
        for c in 0..self.cell_count() {
            let bins = self.cell_bins(c);
            for i in 0..self.d {
                if bins[i] + 1 < per[i] {
                    let mut next = bins.clone();
                    next[i] += 1;
                    let (a, b) = (self.cell_density(c), self.cell_density(self.cell_index(&next)));
                    let ratio = a.max(b) / a.min(b);
                    if ratio < self.min_jump {
                        return Err(Error::Spec(format!(
                            "cells {bins:?} and {next:?} have density ratio {ratio:.4} < {}",
                            self.min_jump
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Draws `n` i.i.d. samples: a cell by mass, then a uniform point in it.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Matrix> {
        self.validate()?;
        let mut rng = stream(seed, Stream::Latents);
        let cumulative: Vec<f64> = self
            .cell_masses
            .iter()
            .scan(0.0, |acc, m| {
                *acc += m;
                Some(*acc)
            })
            .collect();
        let edges: Vec<Vec<f64>> = (0..self.d).map(|i| self.edges(i)).collect();
        let mut data = Vec::with_capacity(n * self.d);
        for _ in 0..n {
            let u: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
            let cell = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
            for (i, b) in self.cell_bins(cell).into_iter().enumerate() {
                let (lo, hi) = (edges[i][b], edges[i][b + 1]);
                data.push(lo + (hi - lo) * rng.random::<f64>());
            }
        }
        Matrix::new(n, self.d, data)
    }
}

/// Generator parameters for random grid densities and mixings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    pub threshold_counts: Vec<usize>,
    pub min_jump: f64,
    /// Per-cell density perturbation factor, drawn log-uniform in `[1, jitter]`.
    pub jitter: f64,
    /// Minimum distance between thresholds and from the support ends.
    pub min_gap: f64,
    pub max_condition: f64,
    pub mixing_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 5000,
            threshold_counts: vec![4, 3],
            min_jump: 2.0,
            jitter: 2.0,
            min_gap: 0.1,
            max_condition: 20.0,
            mixing_scale: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be ≥ 1".into()));
        }
        if self.threshold_counts.is_empty() {
            return Err(Error::Config(
                "threshold_counts must name at least one factor".into(),
            ));
        }
        if !(self.min_jump >= 1.0) || !(self.jitter >= 1.0) {
            return Err(Error::Config("min_jump and jitter must be ≥ 1".into()));
        }
        for &k in &self.threshold_counts {
            if !(self.min_gap > 0.0) || (k + 1) as f64 * self.min_gap >= 1.0 {
                return Err(Error::Config(format!(
                    "{k} thresholds cannot keep a gap of {} inside (0, 1)",
                    self.min_gap
                )));
            }
        }
        if !(self.max_condition >= 1.0) {
            return Err(Error::Config("max_condition must be ≥ 1".into()));
        }
        if !(self.mixing_scale > 0.0) {
            return Err(Error::Config("mixing_scale must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Stream {
    Grid = 1,
    Mixing = 2,
    Latents = 3,
}

/// Independent RNG streams derived from one dataset seed.
fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// Sorted thresholds in (0, 1), each at least `gap` from its neighbours and
/// from the support ends.
fn random_thresholds<R: Rng>(k: usize, gap: f64, rng: &mut R) -> Vec<f64> {
    let free = 1.0 - (k + 1) as f64 * gap;
    let mut u: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * free).collect();
    u.sort_by(f64::total_cmp);
    u.iter()
        .enumerate()
        .map(|(j, v)| v + (j + 1) as f64 * gap)
        .collect()
}

/// Random grid density whose log-density is a sum of per-factor alternating
/// walks plus per-cell jitter. Each walk step exceeds `log(min_jump·jitter)`,
/// so every face (and every marginal bin boundary) carries a jump of at least
/// `min_jump` whatever the jitter.
pub fn random_grid_spec(cfg: &SynthConfig, seed: u64) -> Result<GridDensitySpec> {
    cfg.validate()?;
    let mut rng = stream(seed, Stream::Grid);
    let d = cfg.threshold_counts.len();
    let thresholds: Vec<Vec<f64>> = cfg
        .threshold_counts
        .iter()
        .map(|&k| random_thresholds(k, cfg.min_gap, &mut rng))
        .collect();
    let base_step = (cfg.min_jump * cfg.jitter).ln();
    let walks: Vec<Vec<f64>> = cfg
        .threshold_counts
        .iter()
        .map(|&k| {
            let mut sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let mut level = 0.0;
            let mut w = vec![level];
            for _ in 0..k {
                level += sign * base_step * rng.random_range(1.05..1.3);
                sign = -sign;
                w.push(level);
            }
            w
        })
        .collect();
    let mut spec = GridDensitySpec {
        d,
        thresholds,
        cell_masses: Vec::new(),
        min_jump: cfg.min_jump,
    };
    let log_jitter = cfg.jitter.ln();
    let raw: Vec<f64> = (0..spec.cell_count())
        .map(|c| {
            let bins = spec.cell_bins(c);
            let log_density: f64 = bins.iter().enumerate().map(|(i, &b)| walks[i][b]).sum::<f64>()
                + log_jitter * rng.random::<f64>();
            log_density.exp() * spec.cell_volume(&bins)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    spec.cell_masses = raw.iter().map(|m| m / total).collect();
    spec.validate()?;
    Ok(spec)
}

/// `x = B·tanh(A·(scale·z))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub scale: f64,
}

fn to_dmatrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

fn from_dmatrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Ratio of largest to smallest singular value.
pub fn condition_number(rows: &[Vec<f64>]) -> f64 {
    let sv = to_dmatrix(rows).singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

impl MixingSpec {
    pub fn identity(d: usize, scale: f64) -> Self {
        let eye: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        MixingSpec {
            a: eye.clone(),
            b: eye,
            scale,
        }
    }

    /// Gaussian `A` and `B`, redrawn until both condition numbers are within bound.
    pub fn random(d: usize, max_condition: f64, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Stream::Mixing);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..d)
                .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
                .collect()
        };
        for _ in 0..10_000 {
            let a = draw(&mut rng);
            let b = draw(&mut rng);
            if condition_number(&a) <= max_condition && condition_number(&b) <= max_condition {
                let m = MixingSpec { a, b, scale };
                m.validate()?;
                return Ok(m);
            }
        }
        Err(Error::Spec(format!(
            "no mixing with condition number ≤ {max_condition} found"
        )))
    }

    pub fn latent_dim(&self) -> usize {
        self.a.first().map_or(0, Vec::len)
    }

    pub fn observed_dim(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.a.len();
        let square = |m: &[Vec<f64>]| m.iter().all(|r| r.len() == d);
        if d == 0 || !square(&self.a) || self.b.iter().any(|r| r.len() != d) {
            return Err(Error::Spec("A must be d×d and B must be D×d".into()));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Spec("mixing scale must be > 0".into()));
        }
        Ok(())
    }

    pub fn mix(&self, z: &Matrix) -> Result<Matrix> {
        self.validate()?;
        if z.cols != self.latent_dim() {
            return Err(Error::Dimension(format!(
                "latents have {} columns, mixing expects {}",
                z.cols,
                self.latent_dim()
            )));
        }
        let scaled = Matrix::new(z.rows, z.cols, z.data.iter().map(|v| v * self.scale).collect())?;
        let mut h = scaled.project(&self.a)?;
        h.data.iter_mut().for_each(|v| *v = v.tanh());
        h.project(&self.b)
    }

    /// `z = A⁻¹·atanh(B⁻¹·x) / scale` (requires square `B`).
    pub fn unmix(&self, x: &Matrix) -> Result<Matrix> {
        self.validate()?;
        if self.observed_dim() != self.latent_dim() {
            return Err(Error::Dimension("closed-form inverse needs a square B".into()));
        }
        let inv = |rows: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
            to_dmatrix(rows)
                .try_inverse()
                .map(|m| from_dmatrix(&m))
                .ok_or_else(|| Error::Spec("singular mixing matrix".into()))
        };
        let mut h = x.project(&inv(&self.b)?)?;
        h.data.iter_mut().for_each(|v| *v = v.atanh());
        let mut z = h.project(&inv(&self.a)?)?;
        z.data.iter_mut().for_each(|v| *v /= self.scale);
        Ok(z)
    }
}

/// Per-sample bin indices: the number of thresholds strictly below each value.
pub fn true_quantize(latents: &Matrix, spec: &GridDensitySpec) -> Result<Vec<Vec<usize>>> {
    if latents.cols != spec.d {
        return Err(Error::Dimension(format!(
            "latents have {} columns, spec has {} factors",
            latents.cols, spec.d
        )));
    }
    (0..latents.rows)
        .map(|r| {
            latents
                .row(r)
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::OutsideSupport {
                            row: r,
                            factor: i,
                            value: v,
                        });
                    }
                    Ok(spec.thresholds[i].partition_point(|&t| t < v))
                })
                .collect()
        })
        .collect()
}

/// Everything needed to regenerate a dataset bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub seed: u64,
    pub config: SynthConfig,
    pub grid: GridDensitySpec,
    pub mixing: MixingSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: Option<DatasetMeta>,
    pub z: Matrix,
    pub x: Matrix,
}

pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    generate_with(cfg, seed, None, None)
}

/// [`generate`] with an explicit grid density and/or mixing in place of the
/// random ones.
pub fn generate_with(
    cfg: &SynthConfig,
    seed: u64,
    grid: Option<GridDensitySpec>,
    mixing: Option<MixingSpec>,
) -> Result<Dataset> {
    cfg.validate()?;
    let grid = match grid {
        Some(g) => {
            g.validate()?;
            g
        }
        None => random_grid_spec(cfg, seed)?,
    };
    let mixing = match mixing {
        Some(m) => {
            m.validate()?;
            if m.latent_dim() != grid.d {
                return Err(Error::Config(format!(
                    "mixing expects {} factors, grid has {}",
                    m.latent_dim(),
                    grid.d
                )));
            }
            m
        }
        None => MixingSpec::random(grid.d, cfg.max_condition, cfg.mixing_scale, seed)?,
    };
    let z = grid.sample(cfg.n, seed)?;
    let x = mixing.mix(&z)?;
    Ok(Dataset {
        meta: Some(DatasetMeta {
            seed,
            config: cfg.clone(),
            grid,
            mixing,
        }),
        z,
        x,
    })
}

/// Path of the JSON sidecar belonging to a dataset CSV.
pub fn sidecar_path(csv: &Path) -> std::path::PathBuf {
    csv.with_extension("json")
}

impl Dataset {
    pub fn to_csv(&self) -> String {
        let header: Vec<String> = (1..=self.z.cols)
            .map(|i| format!("z_{i}"))
            .chain((1..=self.x.cols).map(|i| format!("x_{i}")))
            .collect();
        let cols = self.z.cols + self.x.cols;
        let data: Vec<f64> = (0..self.z.rows)
            .flat_map(|r| self.z.row(r).iter().chain(self.x.row(r)).copied())
            .collect();
        matrix_csv(&header, &data, cols)
    }

    /// Writes `path` (CSV) and its sidecar atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(meta) = &self.meta {
            write_atomic(
                &sidecar_path(path),
                serde_json::to_string_pretty(meta)?.as_bytes(),
            )?;
        }
        write_atomic(path, self.to_csv().as_bytes())
    }

    /// Reads a dataset CSV and, when present, its sidecar.
    pub fn load(path: &Path) -> Result<Dataset> {
        let mut reader =
            csv::Reader::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let header = reader
            .headers()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            .clone();
        let mut z_cols = Vec::new();
        let mut x_cols = Vec::new();
        for (k, name) in header.iter().enumerate() {
            if name.starts_with("z_") {
                z_cols.push(k);
            } else if name.starts_with("x_") {
                x_cols.push(k);
            } else {
                return Err(Error::Config(format!(
                    "unexpected column {name:?} in {}",
                    path.display()
                )));
            }
        }
        if x_cols.is_empty() {
            return Err(Error::Config(format!("{} has no x_ columns", path.display())));
        }
        let (mut z, mut x, mut rows) = (Vec::new(), Vec::new(), 0);
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let field = |k: usize| -> Result<f64> {
                rec[k]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad number {:?} in {}", &rec[k], path.display())))
            };
            for &k in &z_cols {
                z.push(field(k)?);
            }
            for &k in &x_cols {
                x.push(field(k)?);
            }
            rows += 1;
        }
        let meta_path = sidecar_path(path);
        let meta = if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path)?;
            let meta: DatasetMeta = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", meta_path.display())))?;
            meta.grid.validate()?;
            Some(meta)
        } else {
            None
        };
        Ok(Dataset {
            meta,
            z: Matrix::new(rows, z_cols.len(), z)?,
            x: Matrix::new(rows, x_cols.len(), x)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ks_uniform(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        v.iter()
            .enumerate()
            .map(|(k, &x)| (x - k as f64 / n).abs().max(((k + 1) as f64 / n - x).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn single_cell_is_uniform() {
        let z = GridDensitySpec::uniform(2).sample(10_000, 3).unwrap();
        assert!(z.data.iter().all(|v| (0.0..=1.0).contains(v)));
        for c in 0..2 {
            assert!(ks_uniform(z.column(c)) < 0.02);
        }
    }

    #[test]
    fn cell_frequencies_match_masses() {
        let masses = vec![0.7, 0.1, 0.1, 0.1];
        let spec = GridDensitySpec::new(vec![vec![0.5], vec![0.5]], masses.clone(), 1.0).unwrap();
        let n = 10_000;
        let z = spec.sample(n, 11).unwrap();
        let bins = true_quantize(&z, &spec).unwrap();
        let mut counts = [0usize; 4];
        for b in &bins {
            counts[spec.cell_index(b)] += 1;
        }
        for (c, &p) in masses.iter().enumerate() {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let freq = counts[c] as f64 / n as f64;
            assert!((freq - p).abs() <= 2.0 * se, "cell {c}: {freq} vs {p}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = random_grid_spec(&SynthConfig::default(), 5).unwrap();
        assert_eq!(spec.sample(100, 9).unwrap(), spec.sample(100, 9).unwrap());
        assert_eq!(
            generate(&SynthConfig::default(), 2).unwrap(),
            generate(&SynthConfig::default(), 2).unwrap()
        );
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(GridDensitySpec::new(vec![vec![0.6, 0.4]], vec![0.2, 0.3, 0.5], 1.0).is_err());
        assert!(GridDensitySpec::new(vec![vec![1.0]], vec![0.5, 0.5], 1.0).is_err());
        assert!(GridDensitySpec::new(vec![vec![0.5]], vec![0.5, 0.4], 1.0).is_err());
        // equal densities on both sides of the cut violate a jump of 2
        assert!(GridDensitySpec::new(vec![vec![0.5]], vec![0.5, 0.5], 2.0).is_err());
        assert!(GridDensitySpec::new(vec![vec![0.5]], vec![0.8, 0.2], 2.0).is_ok());
    }

    #[test]
    fn generated_specs_have_required_jumps() {
        for seed in 0..20 {
            let spec = random_grid_spec(&SynthConfig::default(), seed).unwrap();
            assert_eq!(spec.bins_per_factor(), vec![5, 4]);
            spec.validate().unwrap();
        }
    }

    #[test]
    fn four_factor_layout_constructs() {
        let cfg = SynthConfig {
            threshold_counts: vec![4, 3, 4, 3],
            ..Default::default()
        };
        let spec = random_grid_spec(&cfg, 0).unwrap();
        assert_eq!(spec.cell_count(), 5 * 4 * 5 * 4);
    }

    #[test]
    fn identity_mixing_examples() {
        let m = MixingSpec::identity(2, 0.5);
        let z = Matrix::new(2, 2, vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        let x = m.mix(&z).unwrap();
        assert_eq!(&x.data[..2], &[0.0, 0.0]);
        assert_abs_diff_eq!(x.data[2], 0.76159, epsilon = 1e-5);
        assert_eq!(x.data[3], 0.0);
        let bad = Matrix::new(1, 3, vec![0.0; 3]).unwrap();
        assert!(m.mix(&bad).is_err());
    }

    #[test]
    fn mixing_round_trips() {
        let data = generate(&SynthConfig::default(), 4).unwrap();
        let meta = data.meta.as_ref().unwrap();
        assert!(condition_number(&meta.mixing.a) <= 20.0);
        assert!(condition_number(&meta.mixing.b) <= 20.0);
        let back = meta.mixing.unmix(&data.x).unwrap();
        for (a, b) in back.data.iter().zip(&data.z.data) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn quantize_examples() {
        let spec = GridDensitySpec::new(
            vec![vec![0.5], vec![0.25, 0.75]],
            vec![0.1, 0.05, 0.1, 0.15, 0.4, 0.2],
            1.0,
        )
        .unwrap();
        let z = Matrix::new(1, 2, vec![0.3, 0.5]).unwrap();
        assert_eq!(true_quantize(&z, &spec).unwrap(), vec![vec![0, 1]]);
        let out = Matrix::new(1, 2, vec![1.2, 0.5]).unwrap();
        assert!(matches!(
            true_quantize(&out, &spec),
            Err(Error::OutsideSupport { .. })
        ));
    }

    #[test]
    fn quantize_matches_linear_scan() {
        let spec =
            GridDensitySpec::new(vec![vec![0.3, 0.6], vec![0.2, 0.7]], vec![1.0 / 9.0; 9], 1.0).unwrap();
        let z = spec.sample(2000, 1).unwrap();
        let bins = true_quantize(&z, &spec).unwrap();
        for (r, b) in bins.iter().enumerate() {
            for i in 0..2 {
                let mut scan = 0;
                for &t in &spec.thresholds[i] {
                    if t < z.get(r, i) {
                        scan += 1;
                    }
                }
                assert_eq!(b[i], scan);
            }
        }
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = std::env::temp_dir().join(format!("cliff-synth-{}", std::process::id()));
        let path = dir.join("data.csv");
        let cfg = SynthConfig {
            n: 50,
            ..Default::default()
        };
        let data = generate(&cfg, 1).unwrap();
        data.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, data);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("z_1,z_2,x_1,x_2\n"));
        std::fs::remove_dir_all(dir).unwrap();
    }
}
