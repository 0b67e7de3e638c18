//! Finite-volume ground truth for the LWR conservation law.
//!
//! The traffic state u(t, x) is the normalized vehicle density on a road
//! segment [0, L]: u = 0 is an empty road, u = 1 bumper-to-bumper. The flux
//! follows the Greenshields relation f(u) = V_f u (1 - u), and the entropy
//! solution is approximated with an explicit Godunov scheme. An exact Riemann
//! oracle is provided for validation, and loop-detector style measurement
//! sampling produces the training data.

mod godunov;
mod io;
mod measure;
mod riemann;

pub use godunov::{godunov_flux, simulate, DEFAULT_CFL};
pub use io::{
    read_grid_csv, read_measurements_csv, write_grid_csv, write_measurements_csv, GridMeta,
};
pub use measure::{piecewise_constant_profile, sample_measurements};
pub use riemann::riemann_exact;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Greenshields flow-density relation f(u) = V_f u (1 - u).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxModel {
    free_flow_speed: f64,
}

impl FluxModel {
    pub fn new(free_flow_speed: f64) -> Result<Self> {
        if free_flow_speed > 0.0 && free_flow_speed.is_finite() {
            Ok(Self { free_flow_speed })
        } else {
            Err(Error::Domain(format!(
                "free-flow speed must be positive, got {free_flow_speed}"
            )))
        }
    }

    pub fn free_flow_speed(&self) -> f64 {
        self.free_flow_speed
    }

    /// Flow rate f(u) = V_f u (1 - u). Defined for all real u.
    pub fn flux(&self, u: f64) -> f64 {
        self.free_flow_speed * u * (1.0 - u)
    }

    /// Characteristic speed a(u) = f'(u) = V_f (1 - 2u).
    pub fn characteristic_speed(&self, u: f64) -> f64 {
        self.free_flow_speed * (1.0 - 2.0 * u)
    }

    /// Maximum of |f'| over the admissible density range [0, 1].
    pub fn max_wave_speed(&self) -> f64 {
        self.free_flow_speed
    }
}

/// Space-time domain Λ = [0, T] × [0, L] with its discretization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub t_final: f64,
    pub length: f64,
    pub n_t: usize,
    pub n_x: usize,
}

impl Domain {
    pub fn new(t_final: f64, length: f64, n_t: usize, n_x: usize) -> Result<Self> {
        if !(t_final > 0.0) || !(length > 0.0) {
            return Err(Error::Domain(format!(
                "domain extents must be positive: T={t_final}, L={length}"
            )));
        }
        if n_t == 0 || n_x == 0 {
            return Err(Error::Domain("N_t and N_x must be >= 1".into()));
        }
        Ok(Self {
            t_final,
            length,
            n_t,
            n_x,
        })
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.n_t as f64
    }

    pub fn dx(&self) -> f64 {
        self.length / self.n_x as f64
    }

    /// Time nodes t_k = k Δt, k = 0..N_t.
    pub fn t_axis(&self) -> Vec<f64> {
        (0..=self.n_t).map(|k| k as f64 * self.dt()).collect()
    }

    /// Space nodes x_j = j Δx, j = 0..N_x.
    pub fn x_axis(&self) -> Vec<f64> {
        (0..=self.n_x).map(|j| j as f64 * self.dx()).collect()
    }
}

/// Dense space-time density field with axes metadata.
///
/// `density[[k, j]]` holds the cell value at time t_k and position x_j;
/// shape is (N_t + 1) × (N_x + 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSolution {
    pub density: ndarray::Array2<f64>,
    pub t_axis: Vec<f64>,
    pub x_axis: Vec<f64>,
}

impl GridSolution {
    /// Nearest-node value at (t, x); both must lie inside the domain box.
    pub fn value_at_node(&self, k: usize, j: usize) -> f64 {
        self.density[[k, j]]
    }

    pub fn n_t(&self) -> usize {
        self.t_axis.len() - 1
    }

    pub fn n_x(&self) -> usize {
        self.x_axis.len() - 1
    }
}

/// One observed density record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub t: f64,
    pub x: f64,
    pub u: f64,
}

/// Labeled records on Γ = Γ_init ∪ Γ_boundary (t = 0, or x ∈ {0, L}).
///
/// Noise may push observed values outside [0, 1]; no clamping is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub records: Vec<Measurement>,
    pub noise_sigma: f64,
}

impl MeasurementSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
