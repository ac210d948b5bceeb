//! End-to-end controller construction: invariant sets, shrinkage and the
//! per-variant optimal control configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cis::{compute_cis, inner_box, GriddedInvariantSet, InnerBox, InputLattice, VerifyOptions};
use crate::dynamics::SystemModel;
use crate::error::{Result, ZmpcError};
use crate::ocp::{EconomicCost, SolverSettings, Variant, ZmpcConfig};
use crate::sets::{
    estimate_xd_max, shrink_target, tracked_mask_from_bounds, BoxSet, ShrinkageSpec, XdMaxEstimate,
    ZoneCostSpec,
};

/// Problem data independent of the risk factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSetup {
    pub state_bounds: BoxSet,
    pub input_bounds: BoxSet,
    pub disturbance_bounds: BoxSet,
    pub target: BoxSet,
    pub horizon: usize,
    pub c1: f64,
    pub c2: f64,
    pub economic: EconomicCost,
    pub economic_weight: f64,
    /// `None` derives the mask from where the target is tighter than the state bounds.
    pub tracked_mask: Option<Vec<bool>>,
    pub shrink_lower: Option<Vec<bool>>,
    pub shrink_upper: Option<Vec<bool>>,
    pub solver: SolverSettings,
}

impl ProblemSetup {
    /// Reactor benchmark bounds with horizon 5.
    pub fn cstr_default() -> Self {
        let b = |lb: &[f64], ub: &[f64]| BoxSet::new(lb.to_vec(), ub.to_vec()).expect("valid default box");
        Self {
            state_bounds: b(&[0.0, 345.0], &[1.0, 355.0]),
            input_bounds: b(&[285.0], &[315.0]),
            disturbance_bounds: b(&[-0.1, -2.0], &[0.1, 2.0]),
            target: b(&[0.0, 348.0], &[1.0, 352.0]),
            horizon: 5,
            c1: 1e4,
            c2: 1e4,
            economic: EconomicCost::cstr_concentration(),
            economic_weight: 1.0,
            tracked_mask: None,
            shrink_lower: None,
            shrink_upper: None,
            solver: SolverSettings::default(),
        }
    }

    pub fn mask(&self) -> Vec<bool> {
        self.tracked_mask
            .clone()
            .unwrap_or_else(|| tracked_mask_from_bounds(&self.state_bounds, &self.target))
    }

    pub fn validate(&self, model: &SystemModel) -> Result<()> {
        if self.disturbance_bounds.dim() != model.disturbance_dim() {
            return Err(ZmpcError::DimensionMismatch("disturbance box does not match the model".into()));
        }
        if !self.target.is_subset_of(&self.state_bounds) {
            return Err(ZmpcError::InvalidConfig("target set leaves the state bounds".into()));
        }
        if self.mask().len() != model.state_dim() {
            return Err(ZmpcError::DimensionMismatch("tracked mask length".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSettings {
    pub cells_per_axis: Vec<usize>,
    pub inputs_per_axis: Vec<usize>,
    pub verify: VerifyOptions,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            cells_per_axis: vec![80, 80],
            inputs_per_axis: vec![61],
            verify: VerifyOptions::default(),
        }
    }
}

/// Directory of grid-set files keyed by everything that determines them.
#[derive(Debug, Clone, PartialEq)]
pub struct CisCache {
    dir: PathBuf,
}

impl CisCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, model: &SystemModel, region: &BoxSet, inputs: &InputLattice, cells_per_axis: &[usize]) -> PathBuf {
        let key = serde_json::json!({
            "model": model.fingerprint(),
            "region": region,
            "inputs": inputs,
            "cells_per_axis": cells_per_axis,
        });
        let digest = Sha256::digest(key.to_string().as_bytes());
        self.dir.join(format!("cis-{}.json", &hex::encode(digest)[..16]))
    }

    /// Loads a matching grid set or computes and stores it. The flag reports a cache hit.
    pub fn get_or_compute(
        &self,
        model: &SystemModel,
        region: &BoxSet,
        inputs: &BoxSet,
        cells_per_axis: &[usize],
        inputs_per_axis: &[usize],
    ) -> Result<(GriddedInvariantSet, bool)> {
        let lattice = InputLattice::new(inputs.clone(), inputs_per_axis.to_vec())?;
        let path = self.path_for(model, region, &lattice, cells_per_axis);
        if let Ok(set) = GriddedInvariantSet::read(&path) {
            if &set.region == region
                && set.cells_per_axis == cells_per_axis
                && set.input_lattice == lattice
                && set.model_hash == model.fingerprint()
            {
                return Ok((set, true));
            }
            log::warn!("stale grid set at {}; recomputing", path.display());
        }
        let set = compute_cis(model, region, inputs, cells_per_axis, inputs_per_axis)?;
        std::fs::create_dir_all(&self.dir)?;
        set.write(&path)?;
        Ok((set, false))
    }
}

/// Invariant set of a region together with its verified inner box.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalDesign {
    pub cis: GriddedInvariantSet,
    pub terminal: InnerBox,
}

impl TerminalDesign {
    pub fn compute(
        model: &SystemModel,
        setup: &ProblemSetup,
        grid: &GridSettings,
        region: &BoxSet,
        cache: Option<&CisCache>,
    ) -> Result<Self> {
        let cis = match cache {
            Some(c) => {
                c.get_or_compute(model, region, &setup.input_bounds, &grid.cells_per_axis, &grid.inputs_per_axis)?
                    .0
            }
            None => compute_cis(model, region, &setup.input_bounds, &grid.cells_per_axis, &grid.inputs_per_axis)?,
        };
        Self::from_cis(model, cis, grid)
    }

    pub fn from_cis(model: &SystemModel, cis: GriddedInvariantSet, grid: &GridSettings) -> Result<Self> {
        let terminal = inner_box(&cis, model, &grid.verify)?;
        Ok(Self { cis, terminal })
    }
}

/// Worst one-step disturbance effect over the invariant set of the actual target.
pub fn xd_max_for(model: &SystemModel, setup: &ProblemSetup, actual: &GriddedInvariantSet) -> Result<XdMaxEstimate> {
    let bbox = actual
        .bounding_box()
        .ok_or_else(|| ZmpcError::EmptyInvariantSet("actual target set has no members".into()))?;
    estimate_xd_max(model, &bbox, &setup.input_bounds, &setup.disturbance_bounds, &setup.mask())
}

pub fn shrinkage_for(setup: &ProblemSetup, xd: &XdMaxEstimate, gamma: f64) -> Result<(ShrinkageSpec, BoxSet)> {
    let mut spec = ShrinkageSpec::new(gamma, setup.mask(), xd.xd_max.clone())?;
    spec.shrink_lower = setup.shrink_lower.clone();
    spec.shrink_upper = setup.shrink_upper.clone();
    let modified = shrink_target(&setup.target, &spec)?;
    Ok((spec, modified))
}

/// Everything needed to instantiate any controller variant at one risk factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerDesign {
    pub actual: TerminalDesign,
    pub xd: XdMaxEstimate,
    pub shrinkage: ShrinkageSpec,
    pub modified_target: BoxSet,
    pub modified: TerminalDesign,
}

impl ControllerDesign {
    pub fn build(
        model: &SystemModel,
        setup: &ProblemSetup,
        grid: &GridSettings,
        gamma: f64,
        cache: Option<&CisCache>,
    ) -> Result<Self> {
        setup.validate(model)?;
        let actual = TerminalDesign::compute(model, setup, grid, &setup.target, cache)?;
        let xd = xd_max_for(model, setup, &actual.cis)?;
        Self::with_actual(model, setup, grid, actual, xd, gamma, cache)
    }

    /// Reuses the risk-independent part; the modified set is recomputed
    /// unless it coincides with the actual target.
    pub fn with_actual(
        model: &SystemModel,
        setup: &ProblemSetup,
        grid: &GridSettings,
        actual: TerminalDesign,
        xd: XdMaxEstimate,
        gamma: f64,
        cache: Option<&CisCache>,
    ) -> Result<Self> {
        let (shrinkage, modified_target) = shrinkage_for(setup, &xd, gamma)?;
        let modified = if modified_target == setup.target {
            actual.clone()
        } else {
            TerminalDesign::compute(model, setup, grid, &modified_target, cache)?
        };
        Ok(Self {
            actual,
            xd,
            shrinkage,
            modified_target,
            modified,
        })
    }

    pub fn config(&self, setup: &ProblemSetup, variant: Variant) -> Result<ZmpcConfig> {
        let (target, terminal) = match variant {
            Variant::Nominal => (&setup.target, Some(&self.actual.terminal.bounds)),
            Variant::Proposed => (&self.modified_target, Some(&self.modified.terminal.bounds)),
            Variant::OriginalZoneModifiedTerminal => (&setup.target, Some(&self.modified.terminal.bounds)),
            Variant::NoTerminal => (&self.modified_target, None),
        };
        Ok(ZmpcConfig {
            horizon: setup.horizon,
            zone_cost: ZoneCostSpec::new(setup.c1, setup.c2, target.clone())?,
            state_bounds: setup.state_bounds.clone(),
            input_bounds: setup.input_bounds.clone(),
            terminal_set: terminal.cloned(),
            economic: setup.economic.clone(),
            economic_weight: setup.economic_weight,
            variant,
            solver: setup.solver.clone(),
        })
    }
}
