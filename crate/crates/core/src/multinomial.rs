//! Variational E/M steps for one categorical modality.
//!
//! The log-sum-exp term of the multinomial likelihood is replaced by its
//! Böhning quadratic bound around per-instance expansion points `ψ_i`, which
//! makes the approximate posterior of the stacked loadings `v` Gaussian,
//! `N(ω, Ω)`. `Ω` has the Kronecker form `I ⊗ F⁻¹ + 11ᵀ ⊗ Δ`, so only `K × K`
//! matrices are ever factored.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::CategoricalBlock;
use crate::error::{MmfaError, Result};
use crate::expfam::{softmax_lse_into, Curvature};
use crate::linalg::{add_outer, chol_log_det, quad_form, spd_factor, symmetrize};
use crate::scalar::Real;

/// Instances per block in P-indexed reductions. Blocks are summed in index
/// order, so results do not depend on the worker count.
const REDUCTION_BLOCK: usize = 2048;

/// `z̃_i = z_i − N_i (p_{ψ_i} − A ψ_i)`, stored `(D₂ − 1) × P`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedCounts<T: Real> {
    pub values: DMatrix<T>,
}

/// Posterior factors `F`, `Δ`, `Φ` of the approximate loading posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialPosterior<T: Real> {
    pub categories: usize,
    /// `F = ½ C N Cᵀ + I`.
    pub f: DMatrix<T>,
    pub f_inv: DMatrix<T>,
    pub delta: DMatrix<T>,
    /// `K × (D₂ − 1)`; column `d` is the posterior mean of `v_d`.
    pub phi: DMatrix<T>,
    /// `log det Ω`.
    pub log_det_cov: T,
}

/// Posterior plus the expansion points `Ψ` (`(D₂ − 1) × P`).
#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialState<T: Real> {
    pub posterior: MultinomialPosterior<T>,
    pub psi: DMatrix<T>,
}

impl<T: Real> MultinomialPosterior<T> {
    pub fn factors(&self) -> usize {
        self.f.nrows()
    }

    /// The `N(0, I)` prior expressed in the same factors.
    pub fn prior(factors: usize, categories: usize) -> Self {
        MultinomialPosterior {
            categories,
            f: DMatrix::identity(factors, factors),
            f_inv: DMatrix::identity(factors, factors),
            delta: DMatrix::zeros(factors, factors),
            phi: DMatrix::zeros(factors, categories - 1),
            log_det_cov: T::zero(),
        }
    }

    /// Dense `Ω = I ⊗ F⁻¹ + 11ᵀ ⊗ Δ`, for verification on small problems.
    pub fn dense_covariance(&self) -> DMatrix<T> {
        let k = self.factors();
        let m = self.categories - 1;
        DMatrix::from_fn(m * k, m * k, |r, c| {
            let (dr, kr) = (r / k, r % k);
            let (dc, kc) = (c / k, c % k);
            let diag = if dr == dc { self.f_inv[(kr, kc)] } else { T::zero() };
            diag + self.delta[(kr, kc)]
        })
    }

    /// Stacked posterior mean `ω = [φ_1; …; φ_{D₂−1}]`.
    pub fn dense_mean(&self) -> DVector<T> {
        DVector::from_column_slice(self.phi.as_slice())
    }
}

fn check_block<T: Real>(block: &CategoricalBlock<T>, psi: &DMatrix<T>) -> Result<()> {
    let m = block.categories() - 1;
    if psi.nrows() != m || psi.ncols() != block.instances() {
        return Err(MmfaError::DimensionMismatch(format!(
            "expansion points are {}x{}, expected {}x{}",
            psi.nrows(),
            psi.ncols(),
            m,
            block.instances()
        )));
    }
    Ok(())
}

pub fn adjusted_counts<T: Real>(block: &CategoricalBlock<T>, psi: &DMatrix<T>) -> Result<AdjustedCounts<T>> {
    check_block(block, psi)?;
    let m = block.categories() - 1;
    let a = Curvature::new(block.categories())?;
    let mut values = DMatrix::zeros(m, block.instances());
    let counts = block.counts().as_slice();
    let psi_s = psi.as_slice();
    let trials = block.trials();
    values
        .as_mut_slice()
        .par_chunks_mut(m)
        .enumerate()
        .for_each_init(
            || (vec![T::zero(); m], vec![T::zero(); m]),
            |(probs, a_psi), (i, out)| {
                let psi_i = &psi_s[i * m..(i + 1) * m];
                softmax_lse_into(psi_i, probs);
                a.apply_into(psi_i, a_psi);
                let n = trials[i];
                for d in 0..m {
                    out[d] = counts[i * m + d] - n * (probs[d] - a_psi[d]);
                }
            },
        );
    Ok(AdjustedCounts { values })
}

/// Computes `F`, `Δ` and `Φ` from the scores, trial counts and adjusted
/// counts. Cost is `O(K²P + KPD₂)`.
pub fn multinomial_e_step<T: Real>(
    scores: &DMatrix<T>,
    trials: &DVector<T>,
    ztilde: &AdjustedCounts<T>,
    categories: usize,
) -> Result<MultinomialPosterior<T>> {
    let k = scores.nrows();
    let p = scores.ncols();
    let m = categories.checked_sub(1).filter(|&m| m >= 1).ok_or_else(|| {
        MmfaError::InvalidArgument(format!("need at least 2 categories, got {categories}"))
    })?;
    if trials.len() != p || ztilde.values.ncols() != p || ztilde.values.nrows() != m {
        return Err(MmfaError::DimensionMismatch(format!(
            "scores cover {p} instances; trials {} and adjusted counts {}x{}",
            trials.len(),
            ztilde.values.nrows(),
            ztilde.values.ncols()
        )));
    }
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(MmfaError::Numerical("scores contain non-finite values".into()));
    }
    if trials.iter().any(|&n| n < T::zero()) {
        return Err(MmfaError::InvalidArgument("trial counts must be nonnegative".into()));
    }

    // S = Σ N_i c_i c_iᵀ and W = Σ c_i z̃_iᵀ, reduced block by block in order.
    let zt = ztilde.values.as_slice();
    let partials: Vec<(DMatrix<T>, DMatrix<T>)> = (0..p.div_ceil(REDUCTION_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut s = DMatrix::<T>::zeros(k, k);
            let mut w = DMatrix::<T>::zeros(k, m);
            let end = ((b + 1) * REDUCTION_BLOCK).min(p);
            for i in b * REDUCTION_BLOCK..end {
                let c = scores.column(i);
                add_outer(&mut s, trials[i], c.as_slice());
                let z = &zt[i * m..(i + 1) * m];
                for d in 0..m {
                    let zd = z[d];
                    for r in 0..k {
                        w[(r, d)] += c[r] * zd;
                    }
                }
            }
            (s, w)
        })
        .collect();
    let mut s = DMatrix::<T>::zeros(k, k);
    let mut w = DMatrix::<T>::zeros(k, m);
    for (ps, pw) in partials {
        s += ps;
        w += pw;
    }

    let half = T::of(0.5);
    let eye = DMatrix::<T>::identity(k, k);
    let mut f = s * half + &eye;
    symmetrize(&mut f);
    let f_chol = spd_factor(&f, "multinomial F")?;
    let mut f_inv = f_chol.inverse();
    symmetrize(&mut f_inv);

    let m_t = T::of_usize(m);
    let d2 = T::of_usize(categories);
    let shifted = &f / m_t + &eye;
    let shifted_chol = spd_factor(&shifted, "multinomial F/(D2-1) + I")?;
    let i_minus = &eye - &f_inv;
    let inner = &f_inv + shifted_chol.solve(&i_minus);
    let mut delta = &i_minus * inner / d2;
    symmetrize(&mut delta);

    let mut phi = &f_inv * &w;
    let w_sum: DVector<T> = w.column_sum();
    let shift = &delta * w_sum;
    for mut col in phi.column_iter_mut() {
        col += &shift;
    }

    // log det Ω = −[(m−1) log det F + log det((F + mI)/D₂)]
    let fm = (&f + &eye * m_t) / d2;
    let fm_chol = spd_factor(&fm, "multinomial (F + (D2-1)I)/D2")?;
    let log_det_cov = -(T::of_usize(m - 1) * chol_log_det(&f_chol) + chol_log_det(&fm_chol));

    Ok(MultinomialPosterior { categories, f, f_inv, delta, phi, log_det_cov })
}

/// `Ψ = Φᵀ C`, one column `ψ_i = Φᵀ c_i` per instance.
pub fn psi_update<T: Real>(phi: &DMatrix<T>, scores: &DMatrix<T>) -> Result<DMatrix<T>> {
    if phi.nrows() != scores.nrows() {
        return Err(MmfaError::DimensionMismatch(format!(
            "Φ has {} factor rows, scores have {}",
            phi.nrows(),
            scores.nrows()
        )));
    }
    Ok(phi.tr_mul(scores))
}

/// Per-modality quadratic-program pieces: `H_m = N_i M` with
/// `M = (D₂−1)²/(2D₂) F⁻¹ + (D₂−1)/(2D₂) Δ + ½ΦΦᵀ − (Φ1)(Φ1)ᵀ/(2D₂)`
/// and `ρ_m = Φ z̃_i`.
#[derive(Debug, Clone)]
pub struct MultinomialScoreTerms<T: Real> {
    base: DMatrix<T>,
}

impl<T: Real> MultinomialScoreTerms<T> {
    pub fn new(post: &MultinomialPosterior<T>) -> Self {
        let m = T::of_usize(post.categories - 1);
        let d2 = T::of_usize(post.categories);
        let two_d2 = T::of(2.0) * d2;
        let phi1: DVector<T> = post.phi.column_sum();
        let mut base = &post.f_inv * (m * m / two_d2) + &post.delta * (m / two_d2) + &post.phi * post.phi.transpose() * T::of(0.5);
        add_outer(&mut base, -T::one() / two_d2, phi1.as_slice());
        symmetrize(&mut base);
        MultinomialScoreTerms { base }
    }

    pub fn base(&self) -> &DMatrix<T> {
        &self.base
    }

    pub(crate) fn accumulate(
        &self,
        post: &MultinomialPosterior<T>,
        ztilde: &[T],
        trials: T,
        h: &mut DMatrix<T>,
        rho: &mut DVector<T>,
    ) {
        if trials != T::zero() {
            h.zip_apply(&self.base, |acc, x| *acc += trials * x);
        }
        rho.gemv(T::one(), &post.phi, &DVector::from_column_slice(ztilde), T::one());
    }
}

pub fn multinomial_score_contribution<T: Real>(
    post: &MultinomialPosterior<T>,
    ztilde: &AdjustedCounts<T>,
    trials: &DVector<T>,
    i: usize,
) -> Result<(DMatrix<T>, DVector<T>)> {
    if i >= trials.len() || i >= ztilde.values.ncols() {
        return Err(MmfaError::InvalidArgument(format!("instance {i} out of range")));
    }
    let k = post.factors();
    let terms = MultinomialScoreTerms::new(post);
    let mut h = DMatrix::zeros(k, k);
    let mut rho = DVector::zeros(k);
    terms.accumulate(post, ztilde.values.column(i).as_slice(), trials[i], &mut h, &mut rho);
    Ok((h, rho))
}

/// `log(N! / Π z_d!)` including the pivot count.
pub(crate) fn ln_multinomial_coefficient<T: Real>(counts: &[T], trials: T) -> T {
    use statrs::function::factorial::ln_factorial;
    let n = trials.as_f64().round() as u64;
    let mut acc = ln_factorial(n);
    let mut used = 0u64;
    for &z in counts {
        let z = z.as_f64().round() as u64;
        used += z;
        acc -= ln_factorial(z);
    }
    acc -= ln_factorial(n.saturating_sub(used));
    T::of(acc)
}

/// Expected bound `E_q[log f̃(z_i | v, c_i, ψ_i)]` for one instance, excluding
/// the multinomial coefficient. `cov_quad` is `(c F⁻¹ c, c Δ c)`.
#[inline]
pub(crate) fn expected_instance_bound<T: Real>(
    curvature: &Curvature,
    counts: &[T],
    trials: T,
    psi: &[T],
    mean: &[T],
    cov_quad: (T, T),
    scratch: &mut [T],
) -> T {
    let half = T::of(0.5);
    let m = T::of_usize(curvature.dim());
    let d2 = T::of_usize(curvature.categories());
    let (_, lse_psi) = softmax_lse_into(psi, scratch);
    // z̃ᵀμ with z̃ = z − N(p − Aψ); Aψ is applied through quad-form pieces.
    let psi_sum = psi.iter().fold(T::zero(), |a, &x| a + x);
    let mean_sum = mean.iter().fold(T::zero(), |a, &x| a + x);
    let mut psi_dot_p = T::zero();
    let mut z_dot_mu = T::zero();
    let mut p_dot_mu = T::zero();
    let mut psi_dot_mu = T::zero();
    for d in 0..psi.len() {
        psi_dot_p += psi[d] * scratch[d];
        z_dot_mu += counts[d] * mean[d];
        p_dot_mu += scratch[d] * mean[d];
        psi_dot_mu += psi[d] * mean[d];
    }
    // (Aψ)ᵀμ = ½(ψᵀμ − (1ᵀψ)(1ᵀμ)/D₂)
    let a_psi_dot_mu = half * (psi_dot_mu - psi_sum * mean_sum / d2);
    let ztilde_dot_mu = z_dot_mu - trials * (p_dot_mu - a_psi_dot_mu);
    let expansion = lse_psi - psi_dot_p + half * curvature.quad(psi);
    let trace_term = half * (m * m / d2 * cov_quad.0 + m / d2 * cov_quad.1);
    -trials * expansion + ztilde_dot_mu - trials * half * (curvature.quad(mean) + trace_term)
}

/// Contribution of one categorical modality to the surrogate objective: the
/// expected bound on the complete-data log likelihood plus the entropy of
/// `q(v)`.
pub fn multinomial_objective<T: Real>(
    state: &MultinomialState<T>,
    scores: &DMatrix<T>,
    block: &CategoricalBlock<T>,
) -> Result<T> {
    check_block(block, &state.psi)?;
    let post = &state.posterior;
    let curvature = Curvature::new(post.categories)?;
    let m = post.categories - 1;
    let counts = block.counts().as_slice();
    let psi = state.psi.as_slice();
    let trials = block.trials();
    let p = block.instances();

    let partials: Vec<T> = (0..p.div_ceil(REDUCTION_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut scratch = vec![T::zero(); m];
            let mut acc = T::zero();
            let end = ((b + 1) * REDUCTION_BLOCK).min(p);
            for i in b * REDUCTION_BLOCK..end {
                let c = scores.column(i);
                let mean: Vec<T> = post.phi.tr_mul(&c).iter().copied().collect();
                let cov_quad = (quad_form(&post.f_inv, c.as_slice()), quad_form(&post.delta, c.as_slice()));
                let z = &counts[i * m..(i + 1) * m];
                acc += ln_multinomial_coefficient(z, trials[i]);
                acc += expected_instance_bound(&curvature, z, trials[i], &psi[i * m..(i + 1) * m], &mean, cov_quad, &mut scratch);
            }
            acc
        })
        .collect();
    let data_term = partials.into_iter().fold(T::zero(), |a, x| a + x);

    let half = T::of(0.5);
    let m_t = T::of_usize(m);
    let k = T::of_usize(post.factors());
    let trace_cov = m_t * (post.f_inv.trace() + post.delta.trace());
    let prior_entropy = -half * (post.phi.norm_squared() + trace_cov) + half * post.log_det_cov + half * m_t * k;
    Ok(data_term + prior_entropy)
}
