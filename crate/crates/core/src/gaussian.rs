//! Conjugate E/M steps for the real-valued features.
//!
//! Each feature `j` carries a loading `u_j ~ N(0, I_K)` whose posterior given
//! the scores is exactly Gaussian, `N(a_j, B_j)`. Noise variances are per
//! entry with an inverse-gamma prior and are updated in closed form.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::GaussianBlock;
use crate::error::{MmfaError, Result};
use crate::linalg::{add_outer, chol_log_det, quad_form, spd_factor, symmetrize};
use crate::scalar::Real;

/// Smallest variance an M-step is allowed to return.
pub const VARIANCE_FLOOR: f64 = 1e-9;

/// Inverse-gamma prior on each noise variance, in the parameterization where
/// the closed-form update is `(S + 2/β) / (2(α + 1) + 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGammaPrior<T: Real> {
    pub alpha: T,
    pub beta: T,
}

impl<T: Real> Default for InverseGammaPrior<T> {
    fn default() -> Self {
        InverseGammaPrior { alpha: T::one(), beta: T::of(0.1) }
    }
}

impl<T: Real> InverseGammaPrior<T> {
    pub fn new(alpha: T, beta: T) -> Result<Self> {
        if !(alpha > T::zero() && beta > T::zero() && alpha.is_finite() && beta.is_finite()) {
            return Err(MmfaError::InvalidArgument(format!(
                "inverse-gamma hyperparameters must be positive, got alpha={alpha}, beta={beta}"
            )));
        }
        Ok(InverseGammaPrior { alpha, beta })
    }

    /// Prior mode `1 / (β (α + 1))`.
    pub fn mode(&self) -> T {
        T::one() / (self.beta * (self.alpha + T::one()))
    }

    /// Log density at `x` (scale `1/β`).
    pub fn ln_pdf(&self, x: T) -> T {
        let scale = T::one() / self.beta;
        let ln_gamma_alpha = T::of(statrs::function::gamma::ln_gamma(self.alpha.as_f64()));
        self.alpha * scale.ln() - ln_gamma_alpha - (self.alpha + T::one()) * x.ln() - scale / x
    }
}

/// Per-instance, per-feature noise variances `σ²_ij` (`P × D₁`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVariances<T: Real> {
    pub values: DMatrix<T>,
}

impl<T: Real> NoiseVariances<T> {
    pub fn constant(instances: usize, features: usize, value: T) -> Self {
        NoiseVariances { values: DMatrix::from_element(instances, features, value) }
    }
}

/// Posterior `N(a_j, B_j)` for every feature loading.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFeatureState<T: Real> {
    /// `K × D₁`; column `j` is `a_j`.
    pub means: DMatrix<T>,
    /// `B_j`, one `K × K` matrix per feature.
    pub covariances: Vec<DMatrix<T>>,
    /// `log det B_j`, cached from the factorization.
    pub log_det_covariances: Vec<T>,
}

impl<T: Real> GaussianFeatureState<T> {
    pub fn factors(&self) -> usize {
        self.means.nrows()
    }

    pub fn features(&self) -> usize {
        self.means.ncols()
    }

    /// The prior `N(0, I)` for every feature.
    pub fn prior(factors: usize, features: usize) -> Self {
        GaussianFeatureState {
            means: DMatrix::zeros(factors, features),
            covariances: vec![DMatrix::identity(factors, factors); features],
            log_det_covariances: vec![T::zero(); features],
        }
    }
}

fn check_shapes<T: Real>(scores: &DMatrix<T>, block: &GaussianBlock<T>, noise: Option<&NoiseVariances<T>>) -> Result<()> {
    if scores.ncols() != block.instances() {
        return Err(MmfaError::DimensionMismatch(format!(
            "score matrix has {} instances, real-valued block has {}",
            scores.ncols(),
            block.instances()
        )));
    }
    if let Some(n) = noise {
        if n.values.shape() != block.values().shape() {
            return Err(MmfaError::DimensionMismatch(format!(
                "noise variances are {:?}, data is {:?}",
                n.values.shape(),
                block.values().shape()
            )));
        }
    }
    Ok(())
}

/// `B_j = (C Σ_j⁻¹ Cᵀ + I)⁻¹`, `a_j = B_j C Σ_j⁻¹ y_j`, summing over observed
/// instances only.
pub fn gaussian_e_step<T: Real>(
    scores: &DMatrix<T>,
    noise: &NoiseVariances<T>,
    block: &GaussianBlock<T>,
) -> Result<GaussianFeatureState<T>> {
    check_shapes(scores, block, Some(noise))?;
    let k = scores.nrows();
    let p = scores.ncols();
    let y = block.values();

    let per_feature: Vec<Result<(DVector<T>, DMatrix<T>, T)>> = (0..block.features())
        .into_par_iter()
        .map(|j| {
            let mut precision = DMatrix::<T>::identity(k, k);
            let mut rhs = DVector::<T>::zeros(k);
            for i in 0..p {
                if !block.is_observed(i, j) {
                    continue;
                }
                let s2 = noise.values[(i, j)];
                if !(s2 > T::zero()) {
                    return Err(MmfaError::InvalidArgument(format!(
                        "noise variance at ({i}, {j}) must be positive"
                    )));
                }
                let w = T::one() / s2;
                let c = scores.column(i);
                add_outer(&mut precision, w, c.as_slice());
                rhs.axpy(w * y[(i, j)], &c, T::one());
            }
            let chol = spd_factor(&precision, &format!("gaussian feature {j}"))?;
            let log_det = -chol_log_det(&chol);
            let mean = chol.solve(&rhs);
            let mut cov = chol.inverse();
            symmetrize(&mut cov);
            Ok((mean, cov, log_det))
        })
        .collect();

    let mut means = DMatrix::zeros(k, block.features());
    let mut covariances = Vec::with_capacity(block.features());
    let mut log_det_covariances = Vec::with_capacity(block.features());
    for (j, r) in per_feature.into_iter().enumerate() {
        let (mean, cov, ld) = r?;
        means.set_column(j, &mean);
        covariances.push(cov);
        log_det_covariances.push(ld);
    }
    Ok(GaussianFeatureState { means, covariances, log_det_covariances })
}

/// Closed-form variance update
/// `σ²_ij = [(y_ij − a_jᵀc_i)² + c_iᵀB_jc_i + 2/β] / (2(α+1) + 1)`;
/// masked entries are set to the prior mode.
pub fn gaussian_m_step<T: Real>(
    state: &GaussianFeatureState<T>,
    scores: &DMatrix<T>,
    block: &GaussianBlock<T>,
    prior: &InverseGammaPrior<T>,
) -> Result<NoiseVariances<T>> {
    check_shapes(scores, block, None)?;
    if state.features() != block.features() || state.factors() != scores.nrows() {
        return Err(MmfaError::DimensionMismatch("gaussian state does not match data".into()));
    }
    let p = block.instances();
    let two = T::of(2.0);
    let denom = two * (prior.alpha + T::one()) + T::one();
    let prior_term = two / prior.beta;
    let mode = prior.mode();
    let floor = T::of(VARIANCE_FLOOR);
    let y = block.values();

    let columns: Vec<Vec<T>> = (0..block.features())
        .into_par_iter()
        .map(|j| {
            let a = state.means.column(j);
            let b = &state.covariances[j];
            (0..p)
                .map(|i| {
                    if !block.is_observed(i, j) {
                        return mode;
                    }
                    let c = scores.column(i);
                    let r = y[(i, j)] - a.dot(&c);
                    let v = (r * r + quad_form(b, c.as_slice()) + prior_term) / denom;
                    if v < floor {
                        floor
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    let mut values = DMatrix::zeros(p, block.features());
    for (j, col) in columns.into_iter().enumerate() {
        values.set_column(j, &DVector::from_vec(col));
    }
    Ok(NoiseVariances { values })
}

/// Precomputed second moments `E[u_j u_jᵀ] = B_j + a_j a_jᵀ` used to build
/// each instance's score system.
#[derive(Debug, Clone)]
pub struct GaussianScoreTerms<T: Real> {
    second_moments: Vec<DMatrix<T>>,
}

impl<T: Real> GaussianScoreTerms<T> {
    pub fn new(state: &GaussianFeatureState<T>) -> Self {
        let second_moments = (0..state.features())
            .map(|j| {
                let mut s = state.covariances[j].clone();
                add_outer(&mut s, T::one(), state.means.column(j).as_slice());
                s
            })
            .collect();
        GaussianScoreTerms { second_moments }
    }

    /// Adds this modality's `(H_g, ρ_g)` for an instance into `h` and `rho`.
    /// `values`, `observed` and `variances` are indexed by feature.
    pub(crate) fn accumulate(
        &self,
        state: &GaussianFeatureState<T>,
        values: impl Fn(usize) -> T,
        observed: impl Fn(usize) -> bool,
        variances: impl Fn(usize) -> T,
        h: &mut DMatrix<T>,
        rho: &mut DVector<T>,
    ) {
        for (j, s) in self.second_moments.iter().enumerate() {
            if !observed(j) {
                continue;
            }
            let w = T::one() / variances(j);
            h.zip_apply(s, |acc, x| *acc += w * x);
            rho.axpy(w * values(j), &state.means.column(j), T::one());
        }
    }
}

/// `H_g = Σ_j (B_j + a_j a_jᵀ)/σ²_ij` and `ρ_g = Σ_j y_ij a_j / σ²_ij` over
/// the observed features of instance `i`.
pub fn gaussian_score_contribution<T: Real>(
    state: &GaussianFeatureState<T>,
    noise: &NoiseVariances<T>,
    block: &GaussianBlock<T>,
    i: usize,
) -> Result<(DMatrix<T>, DVector<T>)> {
    if i >= block.instances() {
        return Err(MmfaError::InvalidArgument(format!("instance {i} out of range")));
    }
    let k = state.factors();
    let terms = GaussianScoreTerms::new(state);
    let mut h = DMatrix::zeros(k, k);
    let mut rho = DVector::zeros(k);
    let y = block.values();
    terms.accumulate(
        state,
        |j| y[(i, j)],
        |j| block.is_observed(i, j),
        |j| noise.values[(i, j)],
        &mut h,
        &mut rho,
    );
    Ok((h, rho))
}

/// Contribution of the real-valued block to the surrogate objective: the
/// expected complete-data log posterior plus the entropy of `q(u)`.
pub fn gaussian_objective<T: Real>(
    state: &GaussianFeatureState<T>,
    noise: &NoiseVariances<T>,
    scores: &DMatrix<T>,
    block: &GaussianBlock<T>,
    prior: &InverseGammaPrior<T>,
) -> T {
    let half = T::of(0.5);
    let ln_2pi = T::two_pi().ln();
    let k = T::of_usize(state.factors());
    let y = block.values();
    let mut total = T::zero();
    for j in 0..block.features() {
        let a = state.means.column(j);
        let b = &state.covariances[j];
        let mut feature = T::zero();
        for i in 0..block.instances() {
            if !block.is_observed(i, j) {
                continue;
            }
            let s2 = noise.values[(i, j)];
            let c = scores.column(i);
            let r = y[(i, j)] - a.dot(&c);
            let expected_sq = r * r + quad_form(b, c.as_slice());
            feature += -half * (ln_2pi + s2.ln()) - half * expected_sq / s2 + prior.ln_pdf(s2);
        }
        // E[log N(u; 0, I)] + H[N(a, B)]
        feature += -half * (a.norm_squared() + b.trace()) + half * state.log_det_covariances[j] + half * k;
        total += feature;
    }
    total
}
