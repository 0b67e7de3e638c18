//! Dataset directory layout: grid.csv + grid.meta.json + measurements.csv.

use std::path::Path;

use vsr_pinn::lwr::{
    piecewise_constant_profile, read_grid_csv, read_measurements_csv, sample_measurements,
    simulate, write_grid_csv, write_measurements_csv, GridMeta, GridSolution, MeasurementSet,
    DEFAULT_CFL,
};

use crate::config::SolverConfig;
use crate::CliError;

pub const GRID_FILE: &str = "grid.csv";
pub const META_FILE: &str = "grid.meta.json";
pub const MEASUREMENTS_FILE: &str = "measurements.csv";

/// Simulate the reference solution and sample measurements from it.
pub fn generate(solver: &SolverConfig) -> Result<(GridSolution, MeasurementSet), CliError> {
    let domain = solver.domain().map_err(CliError::from_config_err)?;
    let flux = solver.flux().map_err(CliError::from_config_err)?;
    let u0 = piecewise_constant_profile(domain.n_x, solver.n_plateaus, solver.profile_seed);
    let left = vec![u0[0]; domain.n_t + 1];
    let right = vec![u0[domain.n_x]; domain.n_t + 1];
    let truth = simulate(&u0, &left, &right, &domain, &flux, DEFAULT_CFL)
        .map_err(CliError::from_config_err)?;
    let data = sample_measurements(
        &truth,
        &solver.probes,
        solver.include_initial,
        solver.noise_sigma,
        solver.measurement_seed,
    )
    .map_err(CliError::from_config_err)?;
    Ok((truth, data))
}

pub fn save(
    dir: &Path,
    solver: &SolverConfig,
    truth: &GridSolution,
    data: &MeasurementSet,
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(e.to_string()))?;
    write_grid_csv(truth, &dir.join(GRID_FILE)).map_err(CliError::from_data_err)?;
    write_measurements_csv(data, &dir.join(MEASUREMENTS_FILE)).map_err(CliError::from_data_err)?;
    let meta = GridMeta {
        domain: solver.domain().map_err(CliError::from_config_err)?,
        flux: solver.flux().map_err(CliError::from_config_err)?,
        noise_sigma: Some(solver.noise_sigma),
    };
    let f = std::fs::File::create(dir.join(META_FILE)).map_err(|e| CliError::data(e.to_string()))?;
    serde_json::to_writer_pretty(f, &meta).map_err(|e| CliError::data(e.to_string()))?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(GridMeta, GridSolution, MeasurementSet), CliError> {
    let meta_path = dir.join(META_FILE);
    let f = std::fs::File::open(&meta_path).map_err(|e| {
        CliError::data(format!("missing dataset metadata {}: {e}", meta_path.display()))
    })?;
    let meta: GridMeta =
        serde_json::from_reader(f).map_err(|e| CliError::data(e.to_string()))?;
    let truth = read_grid_csv(&dir.join(GRID_FILE)).map_err(CliError::from_data_err)?;
    let data = read_measurements_csv(
        &dir.join(MEASUREMENTS_FILE),
        meta.noise_sigma.unwrap_or(0.0),
    )
    .map_err(CliError::from_data_err)?;
    Ok((meta, truth, data))
}
