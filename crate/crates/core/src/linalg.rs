//! Small dense helpers around nalgebra's Cholesky factorization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{MmfaError, Result};
use crate::scalar::Real;

/// Diagonal jitter tried in order before a factorization is declared failed.
pub const JITTER_LADDER: [f64; 3] = [0.0, 1e-10, 1e-8];

/// Cholesky factor of a symmetric positive-definite matrix, retrying with the
/// jitter ladder when the plain factorization fails.
pub fn spd_factor<T: Real>(m: &DMatrix<T>, context: &str) -> Result<Cholesky<T, Dyn>> {
    if !m.is_square() {
        return Err(MmfaError::DimensionMismatch(format!(
            "{context}: expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(MmfaError::Numerical(format!(
            "{context}: matrix has non-finite entries"
        )));
    }
    for &jitter in JITTER_LADDER.iter() {
        let mut attempt = m.clone();
        if jitter > 0.0 {
            let j = T::of(jitter);
            for d in 0..attempt.nrows() {
                attempt[(d, d)] += j;
            }
        }
        if let Some(chol) = Cholesky::new(attempt) {
            return Ok(chol);
        }
    }
    Err(MmfaError::Numerical(format!(
        "{context}: matrix is not positive definite"
    )))
}

pub fn spd_inverse<T: Real>(m: &DMatrix<T>, context: &str) -> Result<DMatrix<T>> {
    let mut inv = spd_factor(m, context)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

pub fn spd_solve<T: Real>(m: &DMatrix<T>, rhs: &DVector<T>, context: &str) -> Result<DVector<T>> {
    Ok(spd_factor(m, context)?.solve(rhs))
}

/// `log det` of the factored matrix.
pub fn chol_log_det<T: Real>(chol: &Cholesky<T, Dyn>) -> T {
    let l = chol.l_dirty();
    let mut acc = T::zero();
    for d in 0..l.nrows() {
        acc += l[(d, d)].ln();
    }
    acc + acc
}

/// Replaces `m` by `(m + mᵀ) / 2`.
pub fn symmetrize<T: Real>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = T::of(0.5);
    for r in 0..n {
        for c in (r + 1)..n {
            let v = (m[(r, c)] + m[(c, r)]) * half;
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
}

/// `m += w · x xᵀ` on a square matrix.
#[inline]
pub fn add_outer<T: Real>(m: &mut DMatrix<T>, w: T, x: &[T]) {
    let n = x.len();
    for c in 0..n {
        let wx = w * x[c];
        for r in 0..n {
            m[(r, c)] += wx * x[r];
        }
    }
}

/// `xᵀ M x`.
#[inline]
pub fn quad_form<T: Real>(m: &DMatrix<T>, x: &[T]) -> T {
    let n = x.len();
    let mut acc = T::zero();
    for c in 0..n {
        let mut col = T::zero();
        for r in 0..n {
            col += m[(r, c)] * x[r];
        }
        acc += col * x[c];
    }
    acc
}
