//! Explicit Godunov scheme for the LWR equation.

use ndarray::Array2;

use super::{Domain, FluxModel, GridSolution};
use crate::{Error, Result};

/// Default Courant number for the explicit update.
pub const DEFAULT_CFL: f64 = 0.9;

const CORNER_TOL: f64 = 1e-6;

fn check_range(name: &str, values: &[f64]) -> Result<()> {
    for (i, &u) in values.iter().enumerate() {
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::Domain(format!(
                "{name}[{i}] = {u} outside the admissible density range [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Godunov interface flux for the concave Greenshields flux.
///
/// For a concave flux the exact Riemann flux reduces to
/// min of f over [u_l, u_r] when u_l <= u_r, and max of f over [u_r, u_l]
/// otherwise (attained at the sonic point u = 1/2 when it lies inside).
pub fn godunov_flux(u_left: f64, u_right: f64, model: &FluxModel) -> Result<f64> {
    check_range("u_left", &[u_left])?;
    check_range("u_right", &[u_right])?;
    Ok(godunov_flux_unchecked(u_left, u_right, model))
}

#[inline]
pub(crate) fn godunov_flux_unchecked(u_left: f64, u_right: f64, model: &FluxModel) -> f64 {
    if u_left <= u_right {
        // concave f: minimum over [u_left, u_right] sits at an endpoint
        model.flux(u_left).min(model.flux(u_right))
    } else if u_right <= 0.5 && 0.5 <= u_left {
        // sonic point inside the interval
        model.flux(0.5)
    } else {
        model.flux(u_left).max(model.flux(u_right))
    }
}

/// Run the explicit Godunov update over the whole domain.
///
/// `u0` holds the initial profile at the N_x + 1 space nodes, `ub_minus` and
/// `ub_plus` the boundary traces at the N_t + 1 time nodes. Ghost cells carry
/// the prescribed traces; only the incoming characteristic affects the
/// interior through the Godunov flux. The per-step discrete mass balance
/// Σ u^{k+1} Δx = Σ u^k Δx + Δt (F_in − F_out) holds to machine precision.
pub fn simulate(
    u0: &[f64],
    ub_minus: &[f64],
    ub_plus: &[f64],
    domain: &Domain,
    model: &FluxModel,
    cfl_number: f64,
) -> Result<GridSolution> {
    let n_x = domain.n_x;
    let n_t = domain.n_t;
    if u0.len() != n_x + 1 {
        return Err(Error::Shape(format!(
            "u0 must have N_x + 1 = {} entries, got {}",
            n_x + 1,
            u0.len()
        )));
    }
    if ub_minus.len() != n_t + 1 || ub_plus.len() != n_t + 1 {
        return Err(Error::Shape(format!(
            "boundary traces must have N_t + 1 = {} entries, got {} and {}",
            n_t + 1,
            ub_minus.len(),
            ub_plus.len()
        )));
    }
    check_range("u0", u0)?;
    check_range("ub_minus", ub_minus)?;
    check_range("ub_plus", ub_plus)?;

    if (u0[0] - ub_minus[0]).abs() > CORNER_TOL || (u0[n_x] - ub_plus[0]).abs() > CORNER_TOL {
        return Err(Error::Domain(format!(
            "corner compatibility violated: u0(0)={} vs ub-(0)={}, u0(L)={} vs ub+(0)={}",
            u0[0], ub_minus[0], u0[n_x], ub_plus[0]
        )));
    }

    let dt = domain.dt();
    let dx = domain.dx();
    let ratio = dt * model.max_wave_speed() / dx;
    if ratio > cfl_number {
        // minimal N_t such that (T/N_t) * max|f'| / dx <= cfl
        let suggested = (domain.t_final * model.max_wave_speed() / (dx * cfl_number)).ceil() as usize;
        return Err(Error::CflViolation {
            ratio,
            limit: cfl_number,
            suggested_n_t: suggested,
        });
    }

    let n_cells = n_x + 1;
    let mut density = Array2::<f64>::zeros((n_t + 1, n_cells));
    let mut state: Vec<f64> = u0.to_vec();
    density.row_mut(0).assign(&ndarray::ArrayView1::from(&state));

    let lam = dt / dx;
    let mut fluxes = vec![0.0_f64; n_cells + 1];
    for k in 0..n_t {
        let ghost_left = ub_minus[k];
        let ghost_right = ub_plus[k];
        fluxes[0] = godunov_flux_unchecked(ghost_left, state[0], model);
        for j in 0..n_cells - 1 {
            fluxes[j + 1] = godunov_flux_unchecked(state[j], state[j + 1], model);
        }
        fluxes[n_cells] = godunov_flux_unchecked(state[n_cells - 1], ghost_right, model);
        for j in 0..n_cells {
            state[j] -= lam * (fluxes[j + 1] - fluxes[j]);
        }
        density
            .row_mut(k + 1)
            .assign(&ndarray::ArrayView1::from(&state));
    }

    Ok(GridSolution {
        density,
        t_axis: domain.t_axis(),
        x_axis: domain.x_axis(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn model() -> FluxModel {
        FluxModel::new(1.0).unwrap()
    }

    #[test]
    fn flux_consistency() {
        let m = model();
        assert_relative_eq!(godunov_flux(0.3, 0.3, &m).unwrap(), 0.21, max_relative = 1e-14);
    }

    #[test]
    fn flux_shock_and_rarefaction_cases() {
        let m = model();
        // min of f on [0.2, 0.8]: endpoints both give 0.16
        assert_relative_eq!(godunov_flux(0.2, 0.8, &m).unwrap(), 0.16, max_relative = 1e-14);
        // max of f on [0.2, 0.8]: sonic point u = 1/2
        assert_relative_eq!(godunov_flux(0.8, 0.2, &m).unwrap(), 0.25, max_relative = 1e-14);
    }

    #[test]
    fn flux_matches_grid_search() {
        let m = model();
        for &(ul, ur) in &[(0.1, 0.9), (0.9, 0.1), (0.3, 0.6), (0.7, 0.4), (0.6, 0.55)] {
            let (lo, hi) = if ul <= ur { (ul, ur) } else { (ur, ul) };
            let scan = (0..=10_000)
                .map(|i| m.flux(lo + (hi - lo) * i as f64 / 10_000.0))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(mn, mx), f| {
                    (mn.min(f), mx.max(f))
                });
            let expect = if ul <= ur { scan.0 } else { scan.1 };
            assert_relative_eq!(
                godunov_flux(ul, ur, &m).unwrap(),
                expect,
                max_relative = 1e-7
            );
        }
    }

    #[test]
    fn flux_rejects_out_of_range() {
        let m = model();
        assert!(godunov_flux(-0.1, 0.5, &m).is_err());
        assert!(godunov_flux(0.5, 1.1, &m).is_err());
    }

    #[test]
    fn constant_state_is_exact() {
        let d = Domain::new(0.5, 1.0, 100, 50).unwrap();
        let m = model();
        let u0 = vec![0.4; d.n_x + 1];
        let ub = vec![0.4; d.n_t + 1];
        let sol = simulate(&u0, &ub, &ub, &d, &m, DEFAULT_CFL).unwrap();
        for &v in sol.density.iter() {
            assert_relative_eq!(v, 0.4, max_relative = 1e-13);
        }
    }

    #[test]
    fn cfl_violation_reports_suggestion() {
        let d = Domain::new(1.0, 1.0, 10, 100).unwrap();
        let m = model();
        let u0 = vec![0.4; d.n_x + 1];
        let ub = vec![0.4; d.n_t + 1];
        let err = simulate(&u0, &ub, &ub, &d, &m, DEFAULT_CFL).unwrap_err();
        match err {
            crate::Error::CflViolation { suggested_n_t, .. } => {
                let fixed = Domain::new(1.0, 1.0, suggested_n_t, 100).unwrap();
                assert!(fixed.dt() * m.max_wave_speed() / fixed.dx() <= DEFAULT_CFL + 1e-12);
            }
            other => panic!("expected CFL violation, got {other}"),
        }
    }

    #[test]
    fn corner_compatibility_enforced() {
        let d = Domain::new(0.5, 1.0, 100, 50).unwrap();
        let m = model();
        let u0 = vec![0.4; d.n_x + 1];
        let mut ub = vec![0.4; d.n_t + 1];
        ub[0] = 0.9;
        assert!(simulate(&u0, &ub, &ub, &d, &m, DEFAULT_CFL).is_err());
    }

    #[test]
    fn mass_balance_per_step() {
        let d = Domain::new(0.5, 1.0, 200, 100).unwrap();
        let m = model();
        let u0: Vec<f64> = (0..=d.n_x)
            .map(|j| if j < d.n_x / 2 { 0.2 } else { 0.8 })
            .collect();
        let ubm = vec![0.2; d.n_t + 1];
        let ubp = vec![0.8; d.n_t + 1];
        let sol = simulate(&u0, &ubm, &ubp, &d, &m, DEFAULT_CFL).unwrap();
        let dx = d.dx();
        let dt = d.dt();
        for k in 0..d.n_t {
            let row: Vec<f64> = sol.density.row(k).to_vec();
            let next: Vec<f64> = sol.density.row(k + 1).to_vec();
            let mass_k: f64 = row.iter().sum::<f64>() * dx;
            let mass_next: f64 = next.iter().sum::<f64>() * dx;
            let f_in = godunov_flux(ubm[k], row[0], &m).unwrap();
            let f_out = godunov_flux(row[d.n_x], ubp[k], &m).unwrap();
            let expected = mass_k + dt * (f_in - f_out);
            assert_relative_eq!(mass_next, expected, max_relative = 1e-12, epsilon = 1e-14);
        }
    }

    proptest! {
        #[test]
        fn flux_consistency_random(u in 0.0_f64..=1.0) {
            let m = model();
            prop_assert_eq!(godunov_flux(u, u, &m).unwrap(), m.flux(u));
        }

        #[test]
        fn flux_monotone(ul in 0.0_f64..=1.0, ur in 0.0_f64..=1.0, d in 0.001_f64..0.2) {
            let m = model();
            let f = godunov_flux(ul, ur, &m).unwrap();
            // nondecreasing in u_left
            if ul + d <= 1.0 {
                prop_assert!(godunov_flux(ul + d, ur, &m).unwrap() >= f - 1e-12);
            }
            // nonincreasing in u_right
            if ur + d <= 1.0 {
                prop_assert!(godunov_flux(ul, ur + d, &m).unwrap() <= f + 1e-12);
            }
        }

        #[test]
        fn maximum_principle(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = Domain::new(0.3, 1.0, 60, 40).unwrap();
            let m = model();
            let u0: Vec<f64> = (0..=d.n_x).map(|_| rng.random_range(0.1..0.9)).collect();
            let mut ubm = vec![0.0; d.n_t + 1];
            let mut ubp = vec![0.0; d.n_t + 1];
            ubm[0] = u0[0];
            ubp[0] = u0[d.n_x];
            for k in 1..=d.n_t {
                ubm[k] = rng.random_range(0.1..0.9);
                ubp[k] = rng.random_range(0.1..0.9);
            }
            let lo = u0.iter().chain(&ubm).chain(&ubp).fold(f64::INFINITY, |a, &b| a.min(b));
            let hi = u0.iter().chain(&ubm).chain(&ubp).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let sol = simulate(&u0, &ubm, &ubp, &d, &m, DEFAULT_CFL).unwrap();
            for &v in sol.density.iter() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
