//! Multi-seed synthetic identification runs: generate, train, evaluate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{
    detect_thresholds, mcc, quantized_agreement, DetectorConfig, MccReport, ThresholdReport,
};
use crate::synthdata::{generate_with, Dataset, GridDensitySpec, MixingSpec, SynthConfig};
use crate::trainer::{train_with, EncoderSpec, EpochMetrics, Params, TrainConfig};

/// The three independent randomness sources of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub dataset_seed: u64,
    pub init_seed: u64,
    pub zeta_seed: u64,
}

impl SeedPlan {
    pub fn uniform(seed: u64) -> Self {
        SeedPlan {
            dataset_seed: seed,
            init_seed: seed,
            zeta_seed: seed,
        }
    }

    /// Run `k` of a protocol adds `k` to every source.
    pub fn offset(self, k: u64) -> Self {
        SeedPlan {
            dataset_seed: self.dataset_seed + k,
            init_seed: self.init_seed + k,
            zeta_seed: self.zeta_seed + k,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub synth: SynthConfig,
    /// Fixed grid density shared by every run instead of a random one per seed.
    pub grid: Option<GridDensitySpec>,
    pub mixing: Option<MixingSpec>,
    pub encoder: EncoderSpec,
    /// Its seed fields are replaced by each run's [`SeedPlan`].
    pub train: TrainConfig,
    pub detector: DetectorConfig,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.detector.kernel.validate()?;
        if let Some(grid) = &self.grid {
            grid.validate()?;
        }
        let factors = self
            .grid
            .as_ref()
            .map_or(self.synth.threshold_counts.len(), |g| g.d);
        let observed = self.mixing.as_ref().map_or(factors, MixingSpec::observed_dim);
        if self.encoder.input_dim() != observed || self.encoder.output_dim() != factors {
            return Err(Error::Config(format!(
                "encoder maps {} → {} but the data has {observed} observed and {factors} latent dimensions",
                self.encoder.input_dim(),
                self.encoder.output_dim(),
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub plan: SeedPlan,
    pub dataset: Dataset,
    pub initial: Params,
    pub params: Params,
    pub metrics: Vec<EpochMetrics>,
    pub mcc: MccReport,
    pub thresholds: ThresholdReport,
}

#[derive(Debug)]
pub struct SeedFailure {
    pub plan: SeedPlan,
    pub error: Error,
    pub metrics: Vec<EpochMetrics>,
}

pub type SeedOutcome = std::result::Result<SeedRun, SeedFailure>;

pub fn run_seed(spec: &ExperimentSpec, plan: SeedPlan) -> SeedOutcome {
    let fail = |error, metrics| SeedFailure { plan, error, metrics };
    let dataset = generate_with(
        &spec.synth,
        plan.dataset_seed,
        spec.grid.clone(),
        spec.mixing.clone(),
    )
    .map_err(|e| fail(e, Vec::new()))?;
    let cfg = TrainConfig {
        init_seed: plan.init_seed,
        zeta_seed: plan.zeta_seed,
        ..spec.train.clone()
    };
    let initial = Params::init(&spec.encoder, cfg.init_seed).map_err(|e| fail(e, Vec::new()))?;
    let result = train_with(&dataset.x, initial, &cfg, |_| {}).map_err(|f| fail(f.error, f.metrics))?;
    let evaluate = || -> Result<(MccReport, ThresholdReport)> {
        let z = result.params.encode_plain(&dataset.x)?;
        let report = mcc(&dataset.z, &z)?;
        let meta = dataset
            .meta
            .as_ref()
            .ok_or_else(|| Error::Config("generated dataset carries no spec".into()))?;
        let detected = detect_thresholds(&z, &spec.detector)?;
        let thresholds = quantized_agreement(&dataset.z, &meta.grid, &z, &detected)?;
        Ok((report, thresholds))
    };
    let (mcc, thresholds) = evaluate().map_err(|e| fail(e, result.metrics.clone()))?;
    Ok(SeedRun {
        plan,
        dataset,
        initial: result.initial,
        params: result.params,
        metrics: result.metrics,
        mcc,
        thresholds,
    })
}

/// Runs every plan on a pool of `workers` threads. Outcomes come back in plan
/// order; `on_done` is called as each run finishes.
pub fn run_experiment<F>(
    spec: &ExperimentSpec,
    plans: &[SeedPlan],
    workers: usize,
    on_done: F,
) -> Result<Vec<SeedOutcome>>
where
    F: Fn(&SeedOutcome) + Sync,
{
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(|| {
        plans
            .par_iter()
            .map(|&plan| {
                let outcome = run_seed(spec, plan);
                on_done(&outcome);
                outcome
            })
            .collect()
    }))
}

/// Mean with its standard error (sample standard deviation over `√n`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std_err: f64,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std_err = if n < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    Some(Summary { n, mean, std_err })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub plans: Vec<SeedPlan>,
    pub mcc: Vec<f64>,
    pub agreement: Vec<f64>,
    pub counts_match: Vec<bool>,
    pub failures: Vec<(SeedPlan, String)>,
    pub mcc_summary: Option<Summary>,
}

impl ExperimentReport {
    pub fn from_outcomes(outcomes: &[SeedOutcome]) -> Self {
        let mut report = ExperimentReport {
            plans: Vec::new(),
            mcc: Vec::new(),
            agreement: Vec::new(),
            counts_match: Vec::new(),
            failures: Vec::new(),
            mcc_summary: None,
        };
        for outcome in outcomes {
            match outcome {
                Ok(run) => {
                    report.plans.push(run.plan);
                    report.mcc.push(run.mcc.mcc);
                    report.agreement.push(run.thresholds.agreement);
                    report.counts_match.push(run.thresholds.counts_match);
                }
                Err(f) => report.failures.push((f.plan, f.error.to_string())),
            }
        }
        report.mcc_summary = summarize(&report.mcc);
        report
    }
}
