//! Harness configuration: one JSON document with sections mirroring the
//! library modules. The stock default reproduces the composite training
//! scenario out of the box; every field must be present in a loaded file
//! (missing keys are named errors, unknown keys are rejected), so config
//! files are self-documenting snapshots of a run.

use crate::control::ControlGains;
use crate::learning::LossWeights;
use crate::mhe::MheOptions;
use crate::rigid_body::QuadrotorParams;
use crate::scenarios::{
    training_composite, ClosedLoopController, DisturbanceProfile, EpisodeSetup, ReferenceProfile,
    ScenarioError, SimConfig, TruthIntegrator,
};
use crate::weights::{LearningRates, ThetaParams};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

/// Training-loop knobs of the weight tuner.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Hard cap on training episodes.
    pub max_episodes: usize,
    /// Stop when the mean episode loss changes by less than this relative
    /// amount over two consecutive episodes.
    pub convergence_rel_tol: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { max_episodes: 20, convergence_rel_tol: 1e-3 }
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    pub sim: SimConfig,
    pub params: QuadrotorParams,
    /// Estimation horizon N.
    pub horizon: usize,
    pub solver: MheOptions,
    /// Initial (or fixed) tuning weights.
    pub theta: ThetaParams,
    pub gains: ControlGains,
    pub rates: LearningRates,
    pub loss: LossWeights,
    pub reference: ReferenceProfile,
    pub disturbance: DisturbanceProfile,
    pub controller: ClosedLoopController,
    pub truth: TruthIntegrator,
    pub training: TrainingConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        let params = QuadrotorParams::default();
        let disturbance = training_composite(&params);
        Self {
            sim: SimConfig::default(),
            params,
            horizon: 25,
            solver: MheOptions::default(),
            theta: ThetaParams::uniform_quadrotor(5.0, 50.0, 50.0, 0.4, 0.8),
            gains: ControlGains::default(),
            rates: LearningRates::default(),
            loss: LossWeights::default(),
            reference: ReferenceProfile::Lemniscate(Default::default()),
            disturbance,
            controller: ClosedLoopController::Geometric,
            truth: TruthIntegrator::Rk4Substeps,
            training: TrainingConfig::default(),
        }
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    /// JSON syntax or schema violation, with serde's line/column and key
    /// diagnostics preserved.
    Parse(serde_json::Error),
    /// Structurally valid but semantically inconsistent configuration.
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "config io error: {e}"),
            Self::Parse(e) => write!(f, "config parse error: {e}"),
            Self::Invalid(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(e) => Some(e),
            Self::Parse(e) => Some(e),
            Self::Invalid(_) => None,
        }
    }
}

impl From<std::io::Error> for ConfigError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl From<serde_json::Error> for ConfigError {
    fn from(e: serde_json::Error) -> Self {
        Self::Parse(e)
    }
}

impl HarnessConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate().map_err(ConfigError::Invalid)?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Cross-field consistency beyond what serde can express.
    pub fn validate(&self) -> Result<(), String> {
        self.sim.validate().map_err(|e| e.to_string())?;
        self.params.validate().map_err(|e| e.to_string())?;
        self.theta.validate().map_err(|e| e.to_string())?;
        self.disturbance.validate().map_err(|e| e.to_string())?;
        if self.horizon < 2 {
            return Err(format!("horizon must be at least 2, got {}", self.horizon));
        }
        if self.solver.tolerance <= 0.0 || self.solver.max_iterations == 0 {
            return Err("solver tolerance and iteration cap must be positive".into());
        }
        if self.training.max_episodes == 0 {
            return Err("training.max_episodes must be positive".into());
        }
        if self.training.convergence_rel_tol <= 0.0 {
            return Err("training.convergence_rel_tol must be positive".into());
        }
        Ok(())
    }

    /// The episode setup this configuration describes.
    pub fn setup(&self) -> Result<EpisodeSetup, ScenarioError> {
        let setup = EpisodeSetup {
            sim: self.sim.clone(),
            reference: self.reference.clone(),
            disturbance: self.disturbance.clone(),
            params: self.params.clone(),
            horizon: self.horizon,
            controller: self.controller,
            truth: self.truth,
            solver: self.solver,
        };
        setup.validate()?;
        Ok(setup)
    }
}
