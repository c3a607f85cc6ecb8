//! The variational EM loop.
//!
//! One iteration runs the real-valued E/M steps and every categorical E/M
//! step side by side, then joins them in a per-instance score update. Each
//! stage maximizes the surrogate objective over its own block of variables,
//! so the recorded objective never decreases.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::{CategoricalBlock, HeteroDataset};
use crate::error::{MmfaError, Result};
use crate::gaussian::{
    gaussian_e_step, gaussian_m_step, gaussian_objective, GaussianFeatureState, GaussianScoreTerms,
    InverseGammaPrior, NoiseVariances,
};
use crate::multinomial::{
    adjusted_counts, multinomial_e_step, multinomial_objective, psi_update, AdjustedCounts,
    MultinomialScoreTerms, MultinomialState,
};
use crate::qp::{update_scores, ScoreUpdate};
use crate::scalar::Real;

/// Standard deviation of the initial scores.
pub const INIT_SCORE_SD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec<T: Real> {
    /// Number of latent factors `K`.
    pub factors: usize,
    /// Number of real-valued features `D₁` (0 for none).
    pub gaussian_features: usize,
    pub noise_prior: InverseGammaPrior<T>,
    /// Category count `D₂` of each categorical modality.
    pub categories: Vec<usize>,
    pub score_update: ScoreUpdate<T>,
    pub max_iters: usize,
    /// Relative objective change below which the fit stops.
    pub tol: T,
    pub seed: u64,
}

impl<T: Real> ModelSpec<T> {
    pub fn new(factors: usize, gaussian_features: usize, categories: Vec<usize>) -> Self {
        ModelSpec {
            factors,
            gaussian_features,
            noise_prior: InverseGammaPrior::default(),
            categories,
            score_update: ScoreUpdate::default(),
            max_iters: 500,
            tol: T::of(1e-6),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors == 0 {
            return Err(MmfaError::InvalidArgument("K must be at least 1".into()));
        }
        if !(self.tol > T::zero()) {
            return Err(MmfaError::InvalidArgument("tol must be positive".into()));
        }
        if self.gaussian_features == 0 && self.categories.is_empty() {
            return Err(MmfaError::InvalidArgument("at least one modality is required".into()));
        }
        if let Some(&d) = self.categories.iter().find(|&&d| d < 2) {
            return Err(MmfaError::InvalidArgument(format!("categorical modality with {d} categories")));
        }
        if let ScoreUpdate::Ridge(w) = self.score_update {
            if !(w >= T::zero()) {
                return Err(MmfaError::InvalidArgument("ridge weight must be nonnegative".into()));
            }
        }
        InverseGammaPrior::new(self.noise_prior.alpha, self.noise_prior.beta)?;
        Ok(())
    }

    pub fn check_data(&self, data: &HeteroDataset<T>) -> Result<()> {
        if data.gaussian_features() != self.gaussian_features {
            return Err(MmfaError::DimensionMismatch(format!(
                "model expects {} real-valued features, data has {}",
                self.gaussian_features,
                data.gaussian_features()
            )));
        }
        if data.gaussian_features() > 0 && data.gaussian().is_none() {
            return Err(MmfaError::DimensionMismatch("missing real-valued block".into()));
        }
        let cats = data.category_counts();
        if cats != self.categories {
            return Err(MmfaError::DimensionMismatch(format!(
                "model expects categorical modalities {:?}, data has {:?}",
                self.categories, cats
            )));
        }
        Ok(())
    }

    fn warn_on_large_k(&self) {
        let smallest = std::iter::once(self.gaussian_features)
            .filter(|&d| d > 0)
            .chain(self.categories.iter().map(|&d| d - 1))
            .min();
        if let Some(d) = smallest {
            if self.factors >= d {
                log::warn!("K = {} is not smaller than the smallest modality dimension {d}", self.factors);
            }
        }
    }
}

/// Everything the EM loop updates.
#[derive(Debug, Clone, PartialEq)]
pub struct FitState<T: Real> {
    /// `K × P`; column `i` is `c_i`.
    pub scores: DMatrix<T>,
    pub gaussian: Option<GaussianFeatureState<T>>,
    pub noise: Option<NoiseVariances<T>>,
    pub multinomial: Vec<MultinomialState<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel<T: Real> {
    pub spec: ModelSpec<T>,
    pub state: FitState<T>,
    /// Surrogate objective after each iteration.
    pub objective_trace: Vec<T>,
    pub iterations_run: usize,
    /// True when a measured relative change fell below `tol`.
    pub converged: bool,
}

impl<T: Real> FittedModel<T> {
    pub fn scores(&self) -> &DMatrix<T> {
        &self.state.scores
    }

    pub fn factors(&self) -> usize {
        self.spec.factors
    }
}

fn initial_state<T: Real>(data: &HeteroDataset<T>, spec: &ModelSpec<T>) -> FitState<T> {
    let p = data.instances();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, INIT_SCORE_SD).expect("valid sd");
    let mut scores = DMatrix::zeros(spec.factors, p);
    // column-major fill: instance by instance
    for v in scores.iter_mut() {
        *v = T::of(normal.sample(&mut rng));
    }
    let noise = data.gaussian().map(|g| NoiseVariances::constant(p, g.features(), spec.noise_prior.mode()));
    let multinomial = data
        .categorical()
        .iter()
        .map(|c| MultinomialState {
            posterior: crate::multinomial::MultinomialPosterior::prior(spec.factors, c.categories()),
            psi: DMatrix::zeros(c.categories() - 1, p),
        })
        .collect();
    FitState { scores, gaussian: None, noise, multinomial }
}

pub fn fit<T: Real>(data: &HeteroDataset<T>, spec: &ModelSpec<T>) -> Result<FittedModel<T>> {
    fit_with_observer(data, spec, |_, _| {})
}

/// Runs the EM loop, calling `observer(iteration, state)` after every
/// iteration (1-based).
pub fn fit_with_observer<T: Real, F>(data: &HeteroDataset<T>, spec: &ModelSpec<T>, mut observer: F) -> Result<FittedModel<T>>
where
    F: FnMut(usize, &FitState<T>),
{
    spec.validate()?;
    spec.check_data(data)?;
    spec.warn_on_large_k();

    let mut state = initial_state(data, spec);
    let mut trace: Vec<T> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < spec.max_iters {
        iterations += 1;
        let objective = em_iteration(data, spec, &mut state)
            .map_err(|e| MmfaError::AtIteration { iteration: iterations, source: Box::new(e) })?;
        if !objective.is_finite() {
            return Err(MmfaError::AtIteration {
                iteration: iterations,
                source: Box::new(MmfaError::Numerical("surrogate objective is not finite".into())),
            });
        }
        let previous = trace.last().copied();
        trace.push(objective);
        observer(iterations, &state);
        match previous {
            Some(prev) => {
                let scale = prev.abs().max(T::one());
                if (objective - prev).abs() / scale < spec.tol {
                    converged = true;
                    break;
                }
            }
            // Any measured change satisfies an infinite tolerance.
            None if !spec.tol.is_finite() => break,
            None => {}
        }
    }

    Ok(FittedModel { spec: spec.clone(), state, objective_trace: trace, iterations_run: iterations, converged })
}

/// One pass of the EM loop; returns the surrogate objective afterwards.
fn em_iteration<T: Real>(data: &HeteroDataset<T>, spec: &ModelSpec<T>, state: &mut FitState<T>) -> Result<T> {
    let scores = &state.scores;
    let noise_in = state.noise.as_ref();
    let psi_in: Vec<&DMatrix<T>> = state.multinomial.iter().map(|m| &m.psi).collect();

    let (gauss, multi) = rayon::join(
        || -> Result<Option<(GaussianFeatureState<T>, NoiseVariances<T>)>> {
            match (data.gaussian(), noise_in) {
                (Some(block), Some(noise)) => {
                    let post = gaussian_e_step(scores, noise, block)?;
                    let updated = gaussian_m_step(&post, scores, block, &spec.noise_prior)?;
                    Ok(Some((post, updated)))
                }
                _ => Ok(None),
            }
        },
        || -> Result<Vec<(MultinomialState<T>, AdjustedCounts<T>)>> {
            data.categorical()
                .par_iter()
                .zip(psi_in.par_iter())
                .map(|(block, psi)| categorical_step(scores, block, psi))
                .collect()
        },
    );
    let gauss = gauss?;
    let multi = multi?;

    let new_scores = score_step(data, spec, gauss.as_ref(), &multi)?;

    state.scores = new_scores;
    if let Some((post, noise)) = gauss {
        state.gaussian = Some(post);
        state.noise = Some(noise);
    }
    state.multinomial = multi.into_iter().map(|(s, _)| s).collect();
    surrogate_objective(data, spec, state)
}

/// Adjusted counts at the old `Ψ`, then `F, Δ, Φ`, then the new `Ψ`; returns
/// the state and the adjusted counts at the new expansion points.
fn categorical_step<T: Real>(
    scores: &DMatrix<T>,
    block: &CategoricalBlock<T>,
    psi: &DMatrix<T>,
) -> Result<(MultinomialState<T>, AdjustedCounts<T>)> {
    let ztilde = adjusted_counts(block, psi)?;
    let posterior = multinomial_e_step(scores, block.trials(), &ztilde, block.categories())?;
    let psi = psi_update(&posterior.phi, scores)?;
    let ztilde = adjusted_counts(block, &psi)?;
    Ok((MultinomialState { posterior, psi }, ztilde))
}

fn score_step<T: Real>(
    data: &HeteroDataset<T>,
    spec: &ModelSpec<T>,
    gauss: Option<&(GaussianFeatureState<T>, NoiseVariances<T>)>,
    multi: &[(MultinomialState<T>, AdjustedCounts<T>)],
) -> Result<DMatrix<T>> {
    let k = spec.factors;
    let p = data.instances();
    let gauss_terms = gauss.map(|(post, _)| GaussianScoreTerms::new(post));
    let multi_terms: Vec<MultinomialScoreTerms<T>> =
        multi.iter().map(|(s, _)| MultinomialScoreTerms::new(&s.posterior)).collect();

    let solved: Vec<Result<DVector<T>>> = (0..p)
        .into_par_iter()
        .map(|i| {
            let mut h = DMatrix::zeros(k, k);
            let mut rho = DVector::zeros(k);
            if let (Some(terms), Some((post, noise)), Some(block)) = (&gauss_terms, gauss, data.gaussian()) {
                let y = block.values();
                terms.accumulate(
                    post,
                    |j| y[(i, j)],
                    |j| block.is_observed(i, j),
                    |j| noise.values[(i, j)],
                    &mut h,
                    &mut rho,
                );
            }
            for (((st, zt), terms), block) in multi.iter().zip(&multi_terms).zip(data.categorical()) {
                let z = zt.values.column(i);
                terms.accumulate(&st.posterior, z.as_slice(), block.trials()[i], &mut h, &mut rho);
            }
            update_scores(&h, &rho, spec.score_update)
                .map_err(|e| MmfaError::Numerical(format!("score update for instance {i}: {e}")))
        })
        .collect();

    let mut out = DMatrix::zeros(k, p);
    for (i, c) in solved.into_iter().enumerate() {
        let c = c?;
        if c.iter().any(|v| !v.is_finite()) {
            return Err(MmfaError::Numerical(format!("non-finite score for instance {i}")));
        }
        out.set_column(i, &c);
    }
    Ok(out)
}

/// Surrogate objective: the exact Gaussian evidence lower bound plus the
/// Böhning-bound evidence lower bound of each categorical modality, minus
/// the ridge penalty on the scores.
pub fn surrogate_objective<T: Real>(data: &HeteroDataset<T>, spec: &ModelSpec<T>, state: &FitState<T>) -> Result<T> {
    let mut total = T::zero();
    if let (Some(block), Some(post), Some(noise)) = (data.gaussian(), &state.gaussian, &state.noise) {
        total += gaussian_objective(post, noise, &state.scores, block, &spec.noise_prior);
    }
    for (st, block) in state.multinomial.iter().zip(data.categorical()) {
        total += multinomial_objective(st, &state.scores, block)?;
    }
    let lambda = spec.score_update.ridge_weight();
    if lambda > T::zero() {
        total -= T::of(0.5) * lambda * state.scores.norm_squared();
    }
    Ok(total)
}
