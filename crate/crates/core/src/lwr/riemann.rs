//! Exact entropy solution of the Riemann problem for the Greenshields flux.

use super::FluxModel;
use crate::{Error, Result};

/// Entropy solution of the Riemann problem with left state `u_left` for
/// x < x0 and right state `u_right` for x > x0, evaluated at (t, x).
///
/// For the concave Greenshields flux, u_left < u_right gives a shock moving
/// at the Rankine-Hugoniot speed s = V_f (1 - u_left - u_right), while
/// u_left > u_right opens a rarefaction fan u(ξ) = (1 - ξ/V_f) / 2 between
/// the characteristic speeds of the two states.
pub fn riemann_exact(
    u_left: f64,
    u_right: f64,
    model: &FluxModel,
    t: f64,
    x: f64,
    x0: f64,
) -> Result<f64> {
    if t <= 0.0 {
        return Err(Error::Domain(format!("riemann_exact requires t > 0, got {t}")));
    }
    for (name, u) in [("u_left", u_left), ("u_right", u_right)] {
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::Domain(format!("{name} = {u} outside [0, 1]")));
        }
    }

    let xi = (x - x0) / t;
    if u_left == u_right {
        return Ok(u_left);
    }
    if u_left < u_right {
        // shock: Rankine-Hugoniot speed [f]/[u]
        let s = model.free_flow_speed() * (1.0 - u_left - u_right);
        Ok(if xi < s { u_left } else { u_right })
    } else {
        // rarefaction: characteristic speeds a(u_left) < a(u_right)
        let a_l = model.characteristic_speed(u_left);
        let a_r = model.characteristic_speed(u_right);
        if xi <= a_l {
            Ok(u_left)
        } else if xi >= a_r {
            Ok(u_right)
        } else {
            Ok(0.5 * (1.0 - xi / model.free_flow_speed()))
        }
    }
}
