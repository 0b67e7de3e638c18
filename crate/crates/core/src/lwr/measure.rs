//! Loop-detector style measurement sampling and initial-condition profiles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{GridSolution, Measurement, MeasurementSet};
use crate::{Error, Result};

/// Sample density traces at fixed probe positions over all time steps.
///
/// Probe positions must coincide with grid nodes; no interpolation is
/// performed. With `include_initial` the full t = 0 profile is appended.
/// Additive zero-mean Gaussian noise of standard deviation `noise_sigma` is
/// applied, reproducible via `seed`.
pub fn sample_measurements(
    solution: &GridSolution,
    probe_positions: &[f64],
    include_initial: bool,
    noise_sigma: f64,
    seed: u64,
) -> Result<MeasurementSet> {
    if noise_sigma < 0.0 {
        return Err(Error::Domain(format!(
            "noise_sigma must be nonnegative, got {noise_sigma}"
        )));
    }
    let length = *solution.x_axis.last().expect("nonempty axis");
    let tol = 1e-9 * length.max(1.0);
    let mut probe_indices = Vec::with_capacity(probe_positions.len());
    for &x in probe_positions {
        let j = solution
            .x_axis
            .iter()
            .position(|&node| (node - x).abs() <= tol)
            .ok_or_else(|| {
                Error::Domain(format!("probe position {x} does not lie on the grid"))
            })?;
        probe_indices.push(j);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = if noise_sigma > 0.0 {
        Some(Normal::new(0.0, noise_sigma).expect("valid sigma"))
    } else {
        None
    };
    let draw = |rng: &mut ChaCha8Rng| noise.map_or(0.0, |n| n.sample(rng));

    let mut records = Vec::new();
    for &j in &probe_indices {
        let x = solution.x_axis[j];
        for (k, &t) in solution.t_axis.iter().enumerate() {
            records.push(Measurement {
                t,
                x,
                u: solution.density[[k, j]] + draw(&mut rng),
            });
        }
    }
    if include_initial {
        for (j, &x) in solution.x_axis.iter().enumerate() {
            records.push(Measurement {
                t: 0.0,
                x,
                u: solution.density[[0, j]] + draw(&mut rng),
            });
        }
    }

    Ok(MeasurementSet {
        records,
        noise_sigma,
    })
}

/// Piecewise-constant initial profile with random plateau levels in
/// [0.1, 0.9], producing both shocks and rarefactions.
///
/// Returns N_x + 1 node values; plateau breakpoints split the road into
/// roughly equal thirds with seeded jitter.
pub fn piecewise_constant_profile(n_x: usize, n_plateaus: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_plateaus = n_plateaus.max(1);
    let levels: Vec<f64> = (0..n_plateaus)
        .map(|_| rng.random_range(0.1..0.9))
        .collect();
    // breakpoints: equal segments with up to ±20% jitter of a segment width
    let seg = (n_x + 1) as f64 / n_plateaus as f64;
    let mut breaks = vec![0usize];
    for p in 1..n_plateaus {
        let jitter = rng.random_range(-0.2..0.2) * seg;
        let b = ((p as f64 * seg + jitter).round() as isize)
            .clamp(breaks[p - 1] as isize + 1, n_x as isize) as usize;
        breaks.push(b);
    }
    breaks.push(n_x + 1);

    let mut profile = Vec::with_capacity(n_x + 1);
    for p in 0..n_plateaus {
        for _ in breaks[p]..breaks[p + 1] {
            profile.push(levels[p]);
        }
    }
    profile
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lwr::{simulate, Domain, FluxModel, DEFAULT_CFL};

    fn toy_solution() -> GridSolution {
        let d = Domain::new(0.5, 1.0, 100, 50).unwrap();
        let m = FluxModel::new(1.0).unwrap();
        let u0: Vec<f64> = (0..=d.n_x)
            .map(|j| if j < 25 { 0.3 } else { 0.7 })
            .collect();
        let ubm = vec![0.3; d.n_t + 1];
        let ubp = vec![0.7; d.n_t + 1];
        simulate(&u0, &ubm, &ubp, &d, &m, DEFAULT_CFL).unwrap()
    }

    #[test]
    fn noiseless_records_match_solution() {
        let sol = toy_solution();
        let ms = sample_measurements(&sol, &[0.0, 1.0], false, 0.0, 7).unwrap();
        assert_eq!(ms.len(), 2 * 101);
        for r in &ms.records {
            let j = if r.x == 0.0 { 0 } else { 50 };
            let k = (r.t / 0.005).round() as usize;
            assert_eq!(r.u, sol.density[[k, j]]);
        }
    }

    #[test]
    fn record_counts_with_initial() {
        let sol = toy_solution();
        let ms = sample_measurements(&sol, &[0.0, 1.0], true, 0.02, 7).unwrap();
        assert_eq!(ms.len(), 2 * 101 + 51);
    }

    #[test]
    fn same_seed_reproduces_noise() {
        let sol = toy_solution();
        let a = sample_measurements(&sol, &[0.0, 1.0], true, 0.05, 42).unwrap();
        let b = sample_measurements(&sol, &[0.0, 1.0], true, 0.05, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_measurements(&sol, &[0.0, 1.0], true, 0.05, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn off_grid_probe_rejected() {
        let sol = toy_solution();
        assert!(sample_measurements(&sol, &[0.013], false, 0.0, 7).is_err());
    }

    #[test]
    fn negative_sigma_rejected() {
        let sol = toy_solution();
        assert!(sample_measurements(&sol, &[0.0], false, -0.1, 7).is_err());
    }

    #[test]
    fn plateau_profile_shape() {
        let p = piecewise_constant_profile(200, 3, 11);
        assert_eq!(p.len(), 201);
        for &v in &p {
            assert!((0.1..0.9).contains(&v));
        }
        let distinct: std::collections::BTreeSet<u64> =
            p.iter().map(|v| v.to_bits()).collect();
        assert_eq!(distinct.len(), 3);
        assert_eq!(p, piecewise_constant_profile(200, 3, 11));
    }
}
