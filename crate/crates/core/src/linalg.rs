//! Symmetric positive-definite factorizations with a single jitter retry.

use log::debug;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative jitter added to the diagonal when the first factorization fails.
pub const JITTER: f64 = 1e-10;

/// Cholesky factor of an SPD matrix, possibly after one diagonal jitter.
#[derive(Debug, Clone)]
pub struct SpdFactor<T: Scalar> {
    chol: Cholesky<T, Dyn>,
    jitter: T,
}

impl<T: Scalar> SpdFactor<T> {
    /// Factorizes `a`; on failure retries once with `JITTER·trace/d` added to
    /// the diagonal.
    pub fn new(a: DMatrix<T>, what: &str) -> Result<Self> {
        let d = a.nrows();
        if d != a.ncols() {
            return Err(Error::InvalidInput(format!("{what} is not square")));
        }
        if a.iter().any(|v| !v.is_finite_value()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        if d == 0 {
            return Ok(Self {
                chol: Cholesky::new(a).expect("empty matrix factorizes"),
                jitter: T::zero(),
            });
        }
        if let Some(chol) = Cholesky::new(a.clone()) {
            return Ok(Self {
                chol,
                jitter: T::zero(),
            });
        }
        let trace = a.trace();
        let mut jitter = T::of(JITTER) * trace / T::from_count(d);
        if jitter <= T::zero() {
            jitter = T::of(JITTER);
        }
        let mut b = a.clone();
        for i in 0..d {
            b[(i, i)] += jitter;
        }
        match Cholesky::new(b) {
            Some(chol) => {
                debug!("{what}: factorized after diagonal jitter {jitter}");
                Ok(Self { chol, jitter })
            }
            None => Err(Error::NotPositiveDefinite {
                what: what.to_string(),
                condition: condition_estimate(&a),
            }),
        }
    }

    pub fn jitter(&self) -> T {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve_vec(&self, b: &DVector<T>) -> DVector<T> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<T> {
        self.chol.inverse()
    }
}

/// 2-norm condition estimate from the symmetric eigenvalues (diagnostics only).
pub fn condition_estimate<T: Scalar>(a: &DMatrix<T>) -> f64 {
    if a.nrows() == 0 || a.nrows() != a.ncols() {
        return f64::NAN;
    }
    let af: DMatrix<f64> = a.map(|v| v.as_f64());
    let sym = (&af + af.transpose()) * 0.5;
    let ev = sym.symmetric_eigenvalues();
    let max = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = ev.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// True when a plain Cholesky factorization (no jitter) succeeds.
pub fn is_positive_definite<T: Scalar>(a: &DMatrix<T>) -> bool {
    a.nrows() == a.ncols() && Cholesky::new(a.clone()).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_spd_system() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let f = SpdFactor::new(a.clone(), "a").unwrap();
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let x = f.solve_vec(&b);
        assert!((&a * x - b).amax() < 1e-14);
        assert_eq!(f.jitter(), 0.0);
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = SpdFactor::new(a, "rank one").unwrap();
        assert!(f.jitter() > 0.0);
    }

    #[test]
    fn indefinite_is_rejected_with_condition() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match SpdFactor::new(a, "indef") {
            Err(Error::NotPositiveDefinite { condition, .. }) => assert!((condition - 1.0).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_is_rejected() {
        let a = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(matches!(SpdFactor::new(a, "nan"), Err(Error::NonFinite(_))));
    }
}
