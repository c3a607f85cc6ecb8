//! Per-instance score solves: `argmax −½cᵀHc + cᵀρ`, optionally ridge
//! penalized or constrained to the nonnegative orthant.

use nalgebra::{DMatrix, DVector};

use crate::error::{MmfaError, Result};
use crate::linalg::spd_factor;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreUpdate<T: Real> {
    Unconstrained,
    /// Adds `weight · I` to `H` (a Gaussian prior on the scores).
    Ridge(T),
    NonNegative,
}

impl<T: Real> Default for ScoreUpdate<T> {
    fn default() -> Self {
        ScoreUpdate::Ridge(T::of(1e-6))
    }
}

impl<T: Real> ScoreUpdate<T> {
    pub fn ridge_weight(&self) -> T {
        match self {
            ScoreUpdate::Ridge(w) => *w,
            _ => T::zero(),
        }
    }
}

/// KKT tolerance for the nonnegative solve.
pub const KKT_TOLERANCE: f64 = 1e-8;
const MAX_ACTIVE_SET_STEPS: usize = 10;

pub fn update_scores<T: Real>(h: &DMatrix<T>, rho: &DVector<T>, mode: ScoreUpdate<T>) -> Result<DVector<T>> {
    if h.nrows() != rho.len() || !h.is_square() {
        return Err(MmfaError::DimensionMismatch(format!(
            "score system is {}x{} with a right-hand side of length {}",
            h.nrows(),
            h.ncols(),
            rho.len()
        )));
    }
    match mode {
        ScoreUpdate::Unconstrained | ScoreUpdate::Ridge(_) => {
            let lambda = mode.ridge_weight();
            let mut system = h.clone();
            for d in 0..system.nrows() {
                system[(d, d)] += lambda;
            }
            spd_factor(&system, "score system")
                .map(|chol| chol.solve(rho))
                .map_err(|e| {
                    if lambda == T::zero() {
                        MmfaError::Numerical(format!("{e}; the score system is singular, use a ridge weight"))
                    } else {
                        e
                    }
                })
        }
        ScoreUpdate::NonNegative => solve_nonnegative(h, rho),
    }
}

/// Projected-gradient residual `‖c − max(0, c − ∇)‖∞` with `∇ = Hc − ρ`.
pub fn kkt_residual<T: Real>(h: &DMatrix<T>, rho: &DVector<T>, c: &DVector<T>) -> T {
    let grad = h * c - rho;
    let mut worst = T::zero();
    for d in 0..c.len() {
        let projected = (c[d] - grad[d]).max(T::zero());
        worst = worst.max((c[d] - projected).abs());
    }
    worst
}

/// Lawson–Hanson active set: grow the free set by the coordinate with the
/// steepest ascent direction, solve on the free set, and step back to the
/// boundary whenever a free coordinate would turn negative. Terminates in
/// finitely many steps for positive definite `H`.
fn solve_nonnegative<T: Real>(h: &DMatrix<T>, rho: &DVector<T>) -> Result<DVector<T>> {
    let n = rho.len();
    let tol = T::of(KKT_TOLERANCE);
    let mut x = DVector::<T>::zeros(n);
    let mut free = vec![false; n];
    for _ in 0..MAX_ACTIVE_SET_STEPS * (n + 1) {
        let w = rho - h * &x;
        let entering = (0..n)
            .filter(|&d| !free[d] && w[d] > tol)
            .max_by(|&a, &b| w[a].partial_cmp(&w[b]).unwrap_or(std::cmp::Ordering::Equal));
        let Some(d) = entering else {
            return Ok(x);
        };
        free[d] = true;
        loop {
            let z = solve_free(h, rho, &free)?;
            let blocking: Vec<usize> = (0..n).filter(|&d| free[d] && z[d] <= T::zero()).collect();
            if blocking.is_empty() {
                x = z;
                break;
            }
            let mut alpha = T::one();
            for &d in &blocking {
                let a = x[d] / (x[d] - z[d]);
                if a < alpha {
                    alpha = a;
                }
            }
            x += (&z - &x) * alpha;
            for d in 0..n {
                if free[d] && x[d] <= T::zero() {
                    free[d] = false;
                    x[d] = T::zero();
                }
            }
            if !free.iter().any(|&f| f) {
                break;
            }
        }
    }
    Err(MmfaError::Numerical("nonnegative score solve did not terminate".into()))
}

/// Solution of the free-set equations `H_FF z_F = ρ_F` with `z` zero elsewhere.
fn solve_free<T: Real>(h: &DMatrix<T>, rho: &DVector<T>, free: &[bool]) -> Result<DVector<T>> {
    let idx: Vec<usize> = (0..free.len()).filter(|&d| free[d]).collect();
    let sub = h.select_rows(idx.iter()).select_columns(idx.iter());
    let rhs = DVector::from_iterator(idx.len(), idx.iter().map(|&d| rho[d]));
    let sol = spd_factor(&sub, "nonnegative score system")?.solve(&rhs);
    let mut z = DVector::zeros(free.len());
    for (s, &d) in idx.iter().enumerate() {
        z[d] = sol[s];
    }
    Ok(z)
}
