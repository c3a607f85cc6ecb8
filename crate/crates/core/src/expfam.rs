//! Multinomial log-partition primitives.
//!
//! Natural parameters are stored for the `D₂ − 1` non-pivot categories only;
//! the last category is the pivot and always has natural parameter zero.

use crate::error::{MmfaError, Result};
use crate::scalar::Real;

fn check_params<T: Real>(eta: &[T], what: &str) -> Result<()> {
    if eta.is_empty() {
        return Err(MmfaError::InvalidArgument(format!(
            "{what}: natural parameter vector must have at least one entry"
        )));
    }
    if let Some(pos) = eta.iter().position(|x| !x.is_finite()) {
        return Err(MmfaError::InvalidArgument(format!(
            "{what}: entry {pos} is not finite"
        )));
    }
    Ok(())
}

/// `log(1 + Σ exp(ηⱼ))`, shifted by the largest term (pivot included).
pub fn lse<T: Real>(eta: &[T]) -> Result<T> {
    check_params(eta, "lse")?;
    Ok(lse_unchecked(eta))
}

#[inline]
pub(crate) fn lse_unchecked<T: Real>(eta: &[T]) -> T {
    let mut shift = T::zero();
    for &e in eta {
        if e > shift {
            shift = e;
        }
    }
    let mut acc = (-shift).exp();
    for &e in eta {
        acc += (e - shift).exp();
    }
    shift + acc.ln()
}

/// Full probability vector of length `D₂`; the pivot probability is last.
pub fn softmax_pivot<T: Real>(eta: &[T]) -> Result<Vec<T>> {
    check_params(eta, "softmax_pivot")?;
    let mut out = vec![T::zero(); eta.len() + 1];
    let pivot = softmax_into(eta, &mut out[..eta.len()]);
    out[eta.len()] = pivot;
    Ok(out)
}

/// Writes the non-pivot probabilities into `out` and returns `(pivot, lse)`.
#[inline]
pub(crate) fn softmax_lse_into<T: Real>(eta: &[T], out: &mut [T]) -> (T, T) {
    let mut shift = T::zero();
    for &e in eta {
        if e > shift {
            shift = e;
        }
    }
    let pivot_term = (-shift).exp();
    let mut total = pivot_term;
    for (o, &e) in out.iter_mut().zip(eta) {
        let w = (e - shift).exp();
        *o = w;
        total += w;
    }
    let inv = T::one() / total;
    for o in out.iter_mut() {
        *o *= inv;
    }
    (pivot_term * inv, shift + total.ln())
}

#[inline]
pub(crate) fn softmax_into<T: Real>(eta: &[T], out: &mut [T]) -> T {
    softmax_lse_into(eta, out).0
}

/// Right-hand side of the quadratic upper bound on `lse(η)` expanded at `ψ`:
/// `lse(ψ) + (η − ψ)ᵀ p_ψ + ½ (η − ψ)ᵀ A (η − ψ)`.
pub fn bohning_bound<T: Real>(eta: &[T], psi: &[T]) -> Result<T> {
    if eta.len() != psi.len() {
        return Err(MmfaError::InvalidArgument(format!(
            "bohning_bound: eta has length {}, psi has length {}",
            eta.len(),
            psi.len()
        )));
    }
    check_params(eta, "bohning_bound")?;
    check_params(psi, "bohning_bound")?;
    let mut probs = vec![T::zero(); psi.len()];
    let (_, lse_psi) = softmax_lse_into(psi, &mut probs);
    let diff: Vec<T> = eta.iter().zip(psi).map(|(&e, &p)| e - p).collect();
    let mut linear = T::zero();
    for (d, p) in diff.iter().zip(&probs) {
        linear += *d * *p;
    }
    let curvature = Curvature::new(psi.len() + 1)?;
    Ok(lse_psi + linear + T::of(0.5) * curvature.quad(&diff))
}

/// The fixed Böhning curvature `A = ½ (I − 11ᵀ / D₂)` of dimension `D₂ − 1`,
/// applied without materializing the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Curvature {
    categories: usize,
}

impl Curvature {
    pub fn new(categories: usize) -> Result<Self> {
        if categories < 2 {
            return Err(MmfaError::InvalidArgument(format!(
                "a multinomial needs at least 2 categories, got {categories}"
            )));
        }
        Ok(Curvature { categories })
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    /// Dimension of the matrix, `D₂ − 1`.
    pub fn dim(&self) -> usize {
        self.categories - 1
    }

    /// `trace(A) = (D₂ − 1)² / (2 D₂)`.
    pub fn trace<T: Real>(&self) -> T {
        let m = T::of_usize(self.dim());
        m * m / (T::of(2.0) * T::of_usize(self.categories))
    }

    pub fn apply<T: Real>(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.dim() {
            return Err(MmfaError::DimensionMismatch(format!(
                "curvature of dimension {} applied to a vector of length {}",
                self.dim(),
                v.len()
            )));
        }
        let mut out = vec![T::zero(); v.len()];
        self.apply_into(v, &mut out);
        Ok(out)
    }

    #[inline]
    pub(crate) fn apply_into<T: Real>(&self, v: &[T], out: &mut [T]) {
        let half = T::of(0.5);
        let mean = v.iter().fold(T::zero(), |a, &x| a + x) / T::of_usize(self.categories);
        for (o, &x) in out.iter_mut().zip(v) {
            *o = half * (x - mean);
        }
    }

    /// `vᵀ A v`.
    #[inline]
    pub fn quad<T: Real>(&self, v: &[T]) -> T {
        let mut sq = T::zero();
        let mut sum = T::zero();
        for &x in v {
            sq += x * x;
            sum += x;
        }
        T::of(0.5) * (sq - sum * sum / T::of_usize(self.categories))
    }

    /// Dense `(D₂ − 1) × (D₂ − 1)` form, for verification only.
    pub fn to_dense<T: Real>(&self) -> nalgebra::DMatrix<T> {
        let m = self.dim();
        let d2 = T::of_usize(self.categories);
        let half = T::of(0.5);
        nalgebra::DMatrix::from_fn(m, m, |r, c| {
            let id = if r == c { T::one() } else { T::zero() };
            half * (id - T::one() / d2)
        })
    }
}
