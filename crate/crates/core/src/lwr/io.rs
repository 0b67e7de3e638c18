//! CSV/JSON persistence for grid solutions and measurement sets.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Domain, FluxModel, GridSolution, Measurement, MeasurementSet};
use crate::{Error, Result};

/// JSON sidecar stored next to a grid CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub domain: Domain,
    pub flux: FluxModel,
    #[serde(default)]
    pub noise_sigma: Option<f64>,
}

/// Write a grid solution as CSV: header row of x coordinates, one row per
/// time step with the time stamp in the first column.
pub fn write_grid_csv(solution: &GridSolution, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t\\x".to_string()];
    header.extend(solution.x_axis.iter().map(|x| format!("{x:.17e}")));
    w.write_record(&header)?;
    for (k, &t) in solution.t_axis.iter().enumerate() {
        let mut row = vec![format!("{t:.17e}")];
        row.extend(solution.density.row(k).iter().map(|v| format!("{v:.17e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_grid_csv(path: &Path) -> Result<GridSolution> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let x_axis: Vec<f64> = header
        .iter()
        .skip(1)
        .map(|s| s.parse::<f64>().map_err(|e| Error::Shape(e.to_string())))
        .collect::<Result<_>>()?;
    let mut t_axis = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != x_axis.len() + 1 {
            return Err(Error::Shape(format!(
                "grid CSV row has {} fields, expected {}",
                rec.len(),
                x_axis.len() + 1
            )));
        }
        t_axis.push(
            rec[0]
                .parse::<f64>()
                .map_err(|e| Error::Shape(e.to_string()))?,
        );
        for field in rec.iter().skip(1) {
            rows.push(field.parse::<f64>().map_err(|e| Error::Shape(e.to_string()))?);
        }
    }
    let density = Array2::from_shape_vec((t_axis.len(), x_axis.len()), rows)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(GridSolution {
        density,
        t_axis,
        x_axis,
    })
}

/// Write measurements as CSV with columns t, x, u.
pub fn write_measurements_csv(set: &MeasurementSet, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "x", "u"])?;
    for m in &set.records {
        w.write_record(&[
            format!("{:.17e}", m.t),
            format!("{:.17e}", m.x),
            format!("{:.17e}", m.u),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_measurements_csv(path: &Path, noise_sigma: f64) -> Result<MeasurementSet> {
    let mut r = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(Error::Shape(format!(
                "measurement CSV row has {} fields, expected 3",
                rec.len()
            )));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Shape(e.to_string()));
        records.push(Measurement {
            t: parse(&rec[0])?,
            x: parse(&rec[1])?,
            u: parse(&rec[2])?,
        });
    }
    Ok(MeasurementSet {
        records,
        noise_sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lwr::{sample_measurements, simulate, DEFAULT_CFL};

    #[test]
    fn grid_round_trip() {
        let d = Domain::new(0.2, 1.0, 40, 20).unwrap();
        let m = FluxModel::new(1.0).unwrap();
        let u0 = vec![0.5; d.n_x + 1];
        let ub = vec![0.5; d.n_t + 1];
        let sol = simulate(&u0, &ub, &ub, &d, &m, DEFAULT_CFL).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("grid.csv");
        write_grid_csv(&sol, &path).unwrap();
        let back = read_grid_csv(&path).unwrap();
        assert_eq!(sol, back);
    }

    #[test]
    fn measurements_round_trip() {
        let d = Domain::new(0.2, 1.0, 40, 20).unwrap();
        let m = FluxModel::new(1.0).unwrap();
        let u0 = vec![0.5; d.n_x + 1];
        let ub = vec![0.5; d.n_t + 1];
        let sol = simulate(&u0, &ub, &ub, &d, &m, DEFAULT_CFL).unwrap();
        let ms = sample_measurements(&sol, &[0.0, 1.0], true, 0.02, 3).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("meas.csv");
        write_measurements_csv(&ms, &path).unwrap();
        let back = read_measurements_csv(&path, 0.02).unwrap();
        assert_eq!(ms, back);
    }
}
