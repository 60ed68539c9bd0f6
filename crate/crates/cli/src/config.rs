//! The single JSON run configuration shared by every subcommand.

use std::path::Path;

use cliff_core::criterion::CliffWeights;
use cliff_core::evalkit::DetectorConfig;
use cliff_core::experiment::{ExperimentSpec, SeedPlan};
use cliff_core::synthdata::{GridDensitySpec, MixingSpec, SynthConfig};
use cliff_core::trainer::{EncoderSpec, TrainConfig};
use cliff_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeOptions {
    pub step_deg: f64,
}

impl Default for LandscapeOptions {
    fn default() -> Self {
        LandscapeOptions { step_deg: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckOptions {
    pub batch_sizes: Vec<usize>,
    pub factor_counts: Vec<usize>,
    pub fd_step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            batch_sizes: vec![16, 64],
            factor_counts: vec![2, 3],
            fd_step: cliff_core::selfcheck::DEFAULT_FD_STEP,
            tolerance: cliff_core::selfcheck::DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset_seed: u64,
    pub init_seed: u64,
    pub zeta_seed: u64,
    pub synth: SynthConfig,
    /// Explicit grid density; a random one is drawn from `synth` when absent.
    pub grid: Option<GridDensitySpec>,
    pub mixing: Option<MixingSpec>,
    pub encoder: EncoderSpec,
    /// Seeds are set at the top level, not here.
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    pub landscape: LandscapeOptions,
    pub gradcheck: GradcheckOptions,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Moves the top-level seeds into the sections that use them and
    /// validates everything.
    pub fn resolve(mut self) -> Result<RunConfig> {
        let defaults = TrainConfig::default();
        if self.train.init_seed != defaults.init_seed || self.train.zeta_seed != defaults.zeta_seed {
            return Err(Error::Config(
                "set init_seed and zeta_seed at the top level, not inside train".into(),
            ));
        }
        self.train.init_seed = self.init_seed;
        self.train.zeta_seed = self.zeta_seed;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        self.experiment_spec().validate()?;
        if let Some(m) = &self.mixing {
            m.validate()?;
        }
        if self.gradcheck.batch_sizes.iter().any(|&n| n < 2) || self.gradcheck.factor_counts.contains(&0) {
            return Err(Error::Config(
                "gradcheck sizes must be ≥ 2 rows and ≥ 1 factor".into(),
            ));
        }
        if !(self.gradcheck.fd_step > 0.0 && self.gradcheck.tolerance > 0.0) {
            return Err(Error::Config(
                "gradcheck fd_step and tolerance must be > 0".into(),
            ));
        }
        cliff_core::evalkit::sweep_angles(self.landscape.step_deg)?;
        Ok(())
    }

    pub fn weights(&self) -> &CliffWeights {
        &self.train.weights
    }

    pub fn seed_plan(&self) -> SeedPlan {
        SeedPlan {
            dataset_seed: self.dataset_seed,
            init_seed: self.init_seed,
            zeta_seed: self.zeta_seed,
        }
    }

    pub fn with_seed_plan(mut self, plan: SeedPlan) -> RunConfig {
        self.dataset_seed = plan.dataset_seed;
        self.init_seed = plan.init_seed;
        self.zeta_seed = plan.zeta_seed;
        self.train.init_seed = plan.init_seed;
        self.train.zeta_seed = plan.zeta_seed;
        self
    }

    pub fn experiment_spec(&self) -> ExperimentSpec {
        ExperimentSpec {
            synth: self.synth.clone(),
            grid: self.grid.clone(),
            mixing: self.mixing.clone(),
            encoder: self.encoder.clone(),
            train: self.train.clone(),
            detector: self.detector.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"dataset_seed": 1, "bogus": 2}"#);
        assert!(err.is_err());
        let nested = serde_json::from_str::<RunConfig>(r#"{"train": {"lr": 0.1}}"#);
        assert!(nested.is_err());
    }

    #[test]
    fn seeds_flow_into_training() {
        let cfg: RunConfig = serde_json::from_str(r#"{"init_seed": 4, "zeta_seed": 9}"#).unwrap();
        let cfg = cfg.resolve().unwrap();
        assert_eq!((cfg.train.init_seed, cfg.train.zeta_seed), (4, 9));
        let misplaced: RunConfig = serde_json::from_str(r#"{"train": {"init_seed": 3}}"#).unwrap();
        assert!(misplaced.resolve().is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig::default().resolve().unwrap();
        let back: RunConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
