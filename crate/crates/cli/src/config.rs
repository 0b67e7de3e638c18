//! Declarative YAML configuration for the CLI.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vsr_pinn::lwr::{Domain, FluxModel};
use vsr_pinn::trainer::TrainingConfig;

use crate::CliError;

/// Ground-truth data generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub t_final: f64,
    pub length: f64,
    pub n_t: usize,
    pub n_x: usize,
    pub free_flow_speed: f64,
    /// Plateaus of the piecewise-constant initial density profile.
    pub n_plateaus: usize,
    pub profile_seed: u64,
    pub noise_sigma: f64,
    /// Loop-detector positions (usually the two boundaries).
    pub probes: Vec<f64>,
    pub include_initial: bool,
    pub measurement_seed: u64,
}

impl SolverConfig {
    pub fn domain(&self) -> Result<Domain, vsr_pinn::Error> {
        Domain::new(self.t_final, self.length, self.n_t, self.n_x)
    }

    pub fn flux(&self) -> Result<FluxModel, vsr_pinn::Error> {
        FluxModel::new(self.free_flow_speed)
    }
}

/// Top-level config file: the data-generation block plus the training block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub solver: SolverConfig,
    pub training: TrainingConfig,
}

impl AppConfig {
    /// Parse and validate; unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: AppConfig = serde_yaml::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        cfg.solver
            .domain()
            .map_err(|e| CliError::config(e.to_string()))?;
        cfg.solver
            .flux()
            .map_err(|e| CliError::config(e.to_string()))?;
        cfg.training
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        Ok(cfg)
    }

    /// A self-consistent default, also used by `--print-default-config`.
    pub fn example() -> Self {
        let mut training = TrainingConfig::desk(0);
        training.t_final = 1.0;
        training.length = 1.0;
        AppConfig {
            solver: SolverConfig {
                t_final: 1.0,
                length: 1.0,
                n_t: 800,
                n_x: 200,
                free_flow_speed: 1.0,
                n_plateaus: 4,
                profile_seed: 7,
                noise_sigma: 0.0,
                probes: vec![0.0, 1.0],
                include_initial: true,
                measurement_seed: 13,
            },
            training,
        }
    }
}
