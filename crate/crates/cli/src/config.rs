use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use zmpc::cis::VerifyOptions;
use zmpc::closedloop::DisturbanceMode;
use zmpc::design::{GridSettings, ProblemSetup};
use zmpc::dynamics::{CstrParameters, SystemModel};
use zmpc::ocp::{EconomicCost, SolverSettings, Variant};
use zmpc::sets::BoxSet;
use zmpc::{Result, ZmpcError};

pub const DEFAULT_CONFIG: &str = include_str!("default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub bounds: BoundsSection,
    pub controller: ControllerSection,
    pub cis: CisSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Minutes.
    pub sample_time: f64,
    pub substeps: usize,
    pub parameters: CstrParameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    pub state: BoxSet,
    pub input: BoxSet,
    pub disturbance: BoxSet,
    pub target: BoxSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub variant: Variant,
    pub horizon: usize,
    pub c1: f64,
    pub c2: f64,
    pub economic_weight: f64,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracked_mask: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shrink_lower: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shrink_upper: Option<Vec<bool>>,
    pub failure_budget: usize,
    pub solver: SolverSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CisSection {
    pub cells_per_axis: Vec<usize>,
    pub inputs_per_axis: Vec<usize>,
    /// Relative paths resolve against the output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<String>,
    pub verify: VerifyOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub x0: Vec<f64>,
    pub steps: usize,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub gammas: Vec<f64>,
    pub disturbance: DisturbanceMode,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::parse(DEFAULT_CONFIG).expect("embedded default config parses")
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ZmpcError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.parameters.validate()?;
        let model = self.model()?;
        self.setup().validate(&model)?;
        self.setup().solver.validate()?;
        if self.bounds.state.dim() != 2 || self.bounds.input.dim() != 1 {
            return Err(ZmpcError::DimensionMismatch("the reactor has two states and one input".into()));
        }
        if self.run.x0.len() != 2 {
            return Err(ZmpcError::DimensionMismatch("x0 must have two entries".into()));
        }
        if self.run.steps == 0 || self.controller.horizon == 0 {
            return Err(ZmpcError::InvalidConfig("steps and horizon must be positive".into()));
        }
        if self.cis.cells_per_axis.len() != 2 || self.cis.inputs_per_axis.len() != 1 {
            return Err(ZmpcError::DimensionMismatch("grid sizes must match the reactor dimensions".into()));
        }
        if !(self.controller.gamma >= 0.0) || self.run.gammas.iter().any(|g| !(*g >= 0.0)) {
            return Err(ZmpcError::InvalidConfig("risk factors must be non-negative".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<SystemModel> {
        SystemModel::cstr(self.model.parameters, self.model.sample_time, self.model.substeps)
    }

    pub fn setup(&self) -> ProblemSetup {
        let c = &self.controller;
        ProblemSetup {
            state_bounds: self.bounds.state.clone(),
            input_bounds: self.bounds.input.clone(),
            disturbance_bounds: self.bounds.disturbance.clone(),
            target: self.bounds.target.clone(),
            horizon: c.horizon,
            c1: c.c1,
            c2: c.c2,
            economic: EconomicCost::cstr_concentration(),
            economic_weight: c.economic_weight,
            tracked_mask: c.tracked_mask.clone(),
            shrink_lower: c.shrink_lower.clone(),
            shrink_upper: c.shrink_upper.clone(),
            solver: c.solver.clone(),
        }
    }

    pub fn grid(&self) -> GridSettings {
        GridSettings {
            cells_per_axis: self.cis.cells_per_axis.clone(),
            inputs_per_axis: self.cis.inputs_per_axis.clone(),
            verify: self.cis.verify.clone(),
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical serialization.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parses_and_matches_benchmark_setup() {
        let c = ExperimentConfig::default();
        assert_eq!(c.bounds.state.lb(), &[0.0, 345.0]);
        assert_eq!(c.bounds.state.ub(), &[1.0, 355.0]);
        assert_eq!(c.bounds.input.lb(), &[285.0]);
        assert_eq!(c.bounds.input.ub(), &[315.0]);
        assert_eq!(c.bounds.disturbance.lb(), &[-0.1, -2.0]);
        assert_eq!(c.bounds.disturbance.ub(), &[0.1, 2.0]);
        assert_eq!(c.bounds.target.lb(), &[0.0, 348.0]);
        assert_eq!(c.bounds.target.ub(), &[1.0, 352.0]);
        assert_eq!(c.controller.horizon, 5);
        assert_eq!(c.controller.gamma, 1.0);
        assert_eq!(c.model.parameters, CstrParameters::default());
        assert_eq!(c.controller.solver, SolverSettings::default());
        assert_eq!(c.cis.verify, VerifyOptions::default());
    }

    #[test]
    fn round_trip_is_identity() {
        let c = ExperimentConfig::default();
        let text = c.to_toml();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), text);
        assert_eq!(back.content_hash(), c.content_hash());
    }

    #[test]
    fn optional_masks_round_trip() {
        let mut c = ExperimentConfig::default();
        c.controller.tracked_mask = Some(vec![false, true]);
        c.controller.shrink_lower = Some(vec![false, false]);
        let back = ExperimentConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_ne!(back.content_hash(), ExperimentConfig::default().content_hash());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(ExperimentConfig::parse("not = [valid").is_err());
        let unknown = format!("{DEFAULT_CONFIG}\n[extra]\nx = 1\n");
        assert!(ExperimentConfig::parse(&unknown).is_err());
        let inverted = DEFAULT_CONFIG.replace("lb = [285.0]", "lb = [320.0]");
        assert!(ExperimentConfig::parse(&inverted).is_err());
        let bad_variant = DEFAULT_CONFIG.replace("\"proposed\"", "\"bogus\"");
        assert!(ExperimentConfig::parse(&bad_variant).is_err());
    }
}
