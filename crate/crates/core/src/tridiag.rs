//! Thomas algorithm for tridiagonal systems.

use crate::real::Real;

/// Solves `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i]` in place of `rhs`.
///
/// `lower[0]` and `upper[n-1]` are ignored. `scratch` must have the same length as `rhs`.
/// Returns `false` if a pivot vanishes.
pub fn solve_in_place<S: Real>(lower: &[S], diag: &[S], upper: &[S], rhs: &mut [S], scratch: &mut [S]) -> bool {
    let n = rhs.len();
    debug_assert!(lower.len() == n && diag.len() == n && upper.len() == n && scratch.len() == n);
    if n == 0 {
        return true;
    }
    let tiny = S::min_positive_value();
    if diag[0].abs() <= tiny {
        return false;
    }
    scratch[0] = upper[0] / diag[0];
    rhs[0] /= diag[0];
    for i in 1..n {
        let den = diag[i] - lower[i] * scratch[i - 1];
        if den.abs() <= tiny {
            return false;
        }
        scratch[i] = if i + 1 < n { upper[i] / den } else { S::zero() };
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / den;
    }
    for i in (0..n - 1).rev() {
        let next = rhs[i + 1];
        rhs[i] -= scratch[i] * next;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn laplacian_system() {
        let lower = [0.0, -1.0, -1.0, -1.0];
        let diag = [2.0, 2.0, 2.0, 2.0];
        let upper = [-1.0, -1.0, -1.0, 0.0];
        let mut x = [1.0f64, 0.0, 0.0, 1.0];
        let mut scratch = [0.0; 4];
        assert!(solve_in_place(&lower, &diag, &upper, &mut x, &mut scratch));
        for v in x {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn singular_pivot_reported() {
        let mut x = [1.0, 1.0];
        let mut s = [0.0; 2];
        assert!(!solve_in_place(&[0.0, 1.0], &[0.0, 1.0], &[1.0, 0.0], &mut x, &mut s));
    }

    proptest! {
        #[test]
        fn diagonally_dominant_systems_are_solved(
            entries in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..40)
        ) {
            let n = entries.len();
            let lower: Vec<f64> = entries.iter().map(|e| e.0).collect();
            let upper: Vec<f64> = entries.iter().map(|e| e.1).collect();
            let diag: Vec<f64> = entries.iter().map(|e| 2.5 + e.2).collect();
            let truth: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
            let mut rhs: Vec<f64> = (0..n)
                .map(|i| {
                    let mut v = diag[i] * truth[i];
                    if i > 0 { v += lower[i] * truth[i - 1]; }
                    if i + 1 < n { v += upper[i] * truth[i + 1]; }
                    v
                })
                .collect();
            let mut scratch = vec![0.0; n];
            prop_assert!(solve_in_place(&lower, &diag, &upper, &mut rhs, &mut scratch));
            for i in 0..n {
                prop_assert!((rhs[i] - truth[i]).abs() < 1e-12);
            }
        }
    }
}
