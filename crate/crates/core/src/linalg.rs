//! Small dense helpers: jittered Cholesky and its reverse-mode derivative.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

/// Lower Cholesky factor of `sym(a)`, retried as `sym(a) + εI` when the
/// plain factorization fails.
///
/// `ε` starts at `1e-10 * scale` and doubles up to `1e-6 * scale`, where
/// `scale` is `trace / n` of the reference matrix (or 1 when that is zero).
pub fn cholesky_jittered(a: &DMatrix<f64>, scale: f64, context: &str) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("cholesky of a {}x{} matrix", n, a.ncols())));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularCovariance { context: format!("{context}: non-finite entries") });
    }
    let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
    let sym = (a + a.transpose()) * 0.5;
    if let Some(c) = sym.clone().cholesky() {
        return Ok(c.unpack());
    }
    let mut eps = JITTER_START * scale;
    while eps <= JITTER_MAX * scale * (1.0 + 1e-12) {
        let mut m = sym.clone();
        for i in 0..n {
            m[(i, i)] += eps;
        }
        if let Some(c) = m.cholesky() {
            return Ok(c.unpack());
        }
        eps *= 2.0;
    }
    Err(Error::SingularCovariance { context: context.to_string() })
}

pub fn mean_diagonal(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        0.0
    } else {
        a.trace() / a.nrows() as f64
    }
}

/// Given `L = chol(A)` and a cotangent `L̄` (lower triangle used), returns
/// the symmetric cotangent `Ā`. The jitter is treated as a constant.
pub fn cholesky_backward(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    // Φ(Lᵀ L̄): lower triangle with halved diagonal
    let mut phi = l.transpose() * l_bar.lower_triangle();
    for i in 0..n {
        for j in (i + 1)..n {
            phi[(i, j)] = 0.0;
        }
        phi[(i, i)] *= 0.5;
    }
    let lt = l.transpose();
    // S = L^{-T} Φ L^{-1}
    let y = lt.solve_upper_triangular(&phi).expect("cholesky factor is nonsingular");
    let z = lt.solve_upper_triangular(&y.transpose()).expect("cholesky factor is nonsingular");
    let s = z.transpose();
    (&s + s.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_matrix_gets_jittered() {
        let l = cholesky_jittered(&DMatrix::zeros(2, 2), 0.0, "test").unwrap();
        assert!(l.iter().all(|v| v.abs() < 1e-4));
        assert!(l[(0, 0)] > 0.0);
    }

    #[test]
    fn indefinite_matrix_fails() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky_jittered(&a, 1.0, "rec 7"), Err(Error::SingularCovariance { .. })));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.2, -0.4, 1.2, 3.0, 0.5, -0.4, 0.5, 2.0]);
        let w = DMatrix::from_row_slice(3, 3, &[0.3, 0.0, 0.0, -1.1, 0.7, 0.0, 0.4, 0.9, -0.2]);
        let f = |a: &DMatrix<f64>| -> f64 {
            let l = a.clone().cholesky().unwrap().unpack();
            l.component_mul(&w).sum()
        };
        let l = a.clone().cholesky().unwrap().unpack();
        let abar = cholesky_backward(&l, &w);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..=i {
                let mut ap = a.clone();
                let mut am = a.clone();
                ap[(i, j)] += h;
                am[(i, j)] -= h;
                if i != j {
                    ap[(j, i)] += h;
                    am[(j, i)] -= h;
                }
                let fd = (f(&ap) - f(&am)) / (2.0 * h);
                let an = if i == j { abar[(i, i)] } else { abar[(i, j)] + abar[(j, i)] };
                assert!((fd - an).abs() < 1e-7, "({i},{j}) {fd} vs {an}");
            }
        }
    }
}
