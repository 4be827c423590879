//! SCAD penalty: value, derivative and the exact one-dimensional minimizer.

use crate::error::SolverError;

/// Conventional SCAD shape parameter.
pub const DEFAULT_A: f64 = 3.7;

fn check_a(a: f64) -> Result<(), SolverError> {
    if a > 2.0 {
        Ok(())
    } else {
        Err(SolverError::Parameter(format!("SCAD shape a must exceed 2, got {a}")))
    }
}

/// Derivative of the SCAD penalty at `t >= 0`.
pub fn scad_derivative(t: f64, lambda: f64, a: f64) -> Result<f64, SolverError> {
    check_a(a)?;
    Ok(derivative_unchecked(t, lambda, a))
}

/// Penalty value `P_λ(t)` for `t >= 0`, with `P_λ(0) = 0`.
pub fn scad_value(t: f64, lambda: f64, a: f64) -> Result<f64, SolverError> {
    check_a(a)?;
    Ok(value_unchecked(t, lambda, a))
}

#[inline]
pub(crate) fn derivative_unchecked(t: f64, lambda: f64, a: f64) -> f64 {
    if t <= lambda {
        lambda
    } else if t < a * lambda {
        (a * lambda - t) / (a - 1.0)
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn value_unchecked(t: f64, lambda: f64, a: f64) -> f64 {
    let t = t.abs();
    if t <= lambda {
        lambda * t
    } else if t <= a * lambda {
        (2.0 * a * lambda * t - t * t - lambda * lambda) / (2.0 * (a - 1.0))
    } else {
        lambda * lambda * (a + 1.0) / 2.0
    }
}

#[inline]
fn univariate_objective(t: f64, zabs: f64, v: f64, lambda: f64, a: f64) -> f64 {
    0.5 * v * t * t - zabs * t + value_unchecked(t, lambda, a)
}

/// Global minimizer of `½ v θ² − z θ + P_λ(|θ|)`.
///
/// Each of the three penalty regions is a quadratic in `|θ|`; the region
/// minima (or endpoints, where the region is concave) are compared directly,
/// so the answer is exact even when `v < 1/(a−1)`. Exact ties pick the
/// smaller `|θ|`.
pub fn scad_univariate_update(z: f64, v: f64, lambda: f64, a: f64) -> f64 {
    if lambda <= 0.0 {
        return z / v;
    }
    let zabs = z.abs();
    let al = a * lambda;
    let mut cands = [0.0f64; 5];
    let mut nc = 0;
    let mut push = |t: f64| {
        cands[nc] = t;
        nc += 1;
    };
    // |θ| in [0, λ]: ½vt² − (|z|−λ)t
    push(((zabs - lambda) / v).clamp(0.0, lambda));
    // |θ| in [λ, aλ]: ½(v − 1/(a−1))t² − (|z| − aλ/(a−1))t
    let curv = v - 1.0 / (a - 1.0);
    if curv > 0.0 {
        push(((zabs - al / (a - 1.0)) / curv).clamp(lambda, al));
    } else {
        push(lambda);
        push(al);
    }
    // |θ| >= aλ: ½vt² − |z|t
    push((zabs / v).max(al));
    let mut best_t = cands[0];
    let mut best_f = univariate_objective(best_t, zabs, v, lambda, a);
    for &t in &cands[1..nc] {
        let f = univariate_objective(t, zabs, v, lambda, a);
        if f < best_f || (f == best_f && t < best_t) {
            best_t = t;
            best_f = f;
        }
    }
    if best_t == 0.0 {
        0.0
    } else {
        best_t.copysign(z)
    }
}
