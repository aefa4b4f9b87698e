use crate::error::{invalid, Result};
use crate::ops::sigmoid_via_tanh;

/// Default tolerance on `|Σσ(zᵢ + b) − 1|`.
pub const SOLVE_BIAS_TOL: f64 = 1e-12;

/// `[−ln(n−1) − max z, −ln(n−1) − min z]`, which contains the unique root of
/// `Σσ(zᵢ + b) = 1`.
pub fn bias_bracket(z: &[f64]) -> Result<(f64, f64)> {
    if z.len() < 2 {
        return Err(invalid(format!("solve_bias needs at least 2 logits, got {}", z.len())));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(invalid("solve_bias: logits must be finite"));
    }
    let base = -((z.len() - 1) as f64).ln();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = z.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((base - max, base - min))
}

fn total(z: &[f64], b: f64) -> f64 {
    z.iter().map(|&x| sigmoid_via_tanh(x + b)).sum()
}

/// Bias `b*` with `Σσ(zᵢ + b*) = 1`, by bisection on [`bias_bracket`].
/// Stops once the residual is within `tol` or the bracket cannot shrink.
pub fn solve_bias(z: &[f64], tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(invalid(format!("tol must be > 0, got {tol}")));
    }
    let (mut lo, mut hi) = bias_bracket(z)?;
    if lo == hi {
        return Ok(lo);
    }
    let mut best = lo;
    let mut best_err = (total(z, lo) - 1.0).abs();
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f = total(z, mid) - 1.0;
        if f.abs() < best_err {
            best = mid;
            best_err = f.abs();
        }
        if f == 0.0 {
            break;
        }
        if f < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if best_err <= tol && hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
            break;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logits() {
        let b = solve_bias(&[0.0; 5], SOLVE_BIAS_TOL).unwrap();
        assert!((b + 4f64.ln()).abs() < 1e-12);
        assert_eq!(solve_bias(&[0.0, 0.0], SOLVE_BIAS_TOL).unwrap(), 0.0);
    }

    #[test]
    fn rejects_short_input() {
        assert!(solve_bias(&[1.0], 1e-12).is_err());
        assert!(solve_bias(&[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn shift_equivariant() {
        let z = [0.3, -1.2, 2.0, 0.0];
        let b = solve_bias(&z, 1e-12).unwrap();
        let shifted: Vec<f64> = z.iter().map(|x| x + 1.5).collect();
        let b2 = solve_bias(&shifted, 1e-12).unwrap();
        assert!((b2 - (b - 1.5)).abs() < 2e-12);
    }
}
