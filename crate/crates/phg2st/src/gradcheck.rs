//! Central finite-difference gradient checking.
//!
//! This is the independent oracle for every analytic gradient in the crate:
//! it knows nothing about the tape and just perturbs raw input slices. Kept
//! as a public module so integration tests and examples can drive it against
//! the full model, not only individual ops.

use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest scaled difference between two gradient vectors:
/// `max_i |a_i - b_i| / max(1, |a_i|, |b_i|)`. The `max(1, ..)` floor makes
/// the comparison absolute for tiny gradients, where relative error is
/// dominated by finite-difference noise.
pub fn max_scaled_diff(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

/// Error if the two gradients disagree beyond `tol` under [`max_scaled_diff`].
pub fn check_against(analytic: &[f64], numeric: &[f64], tol: f64) -> Result<()> {
    if analytic.len() != numeric.len() {
        return Err(Error::Dim {
            op: "gradcheck",
            details: format!("analytic len {}, numeric len {}", analytic.len(), numeric.len()),
        });
    }
    let worst = max_scaled_diff(analytic, numeric);
    if worst >= tol {
        let (idx, _) = analytic
            .iter()
            .zip(numeric)
            .enumerate()
            .max_by(|(_, (a1, n1)), (_, (a2, n2))| {
                let d1 = (*a1 - *n1).abs() / 1.0_f64.max(a1.abs()).max(n1.abs());
                let d2 = (*a2 - *n2).abs() / 1.0_f64.max(a2.abs()).max(n2.abs());
                d1.partial_cmp(&d2).unwrap()
            })
            .unwrap();
        return Err(Error::Numerical(format!(
            "gradient mismatch: scaled error {worst:.3e} >= {tol:.1e} at index {idx} \
             (analytic {}, numeric {})",
            analytic[idx], numeric[idx]
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_recovers_quadratic_gradient() {
        // f(x) = sum x_i^2, grad = 2x.
        let x = vec![1.0, -2.0, 0.5];
        let g = finite_diff(|v| v.iter().map(|a| a * a).sum(), &x, 1e-5);
        check_against(&g, &[2.0, -4.0, 1.0], 1e-8).unwrap();
    }

    #[test]
    fn check_against_flags_disagreement() {
        assert!(check_against(&[1.0, 2.0], &[1.0, 2.5], 1e-4).is_err());
        assert!(check_against(&[1.0], &[1.0, 2.0], 1e-4).is_err());
    }
}
