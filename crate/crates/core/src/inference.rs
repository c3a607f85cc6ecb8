//! Post-fit tasks on a frozen model: scoring new instances, predictive
//! likelihood, quantile anomaly detection, imputation and top-k recall.
//!
//! Nothing here mutates the model.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::{GaussianBlock, HeteroDataset, Instance, ObservationMask};
use crate::error::{MmfaError, Result};
use crate::expfam::{softmax_lse_into, softmax_pivot, Curvature};
use crate::fit::FittedModel;
use crate::gaussian::{GaussianFeatureState, GaussianScoreTerms, VARIANCE_FLOOR};
use crate::linalg::quad_form;
use crate::multinomial::{expected_instance_bound, ln_multinomial_coefficient, MultinomialScoreTerms};
use crate::qp::update_scores;
use crate::scalar::Real;

/// Inner fixed-point limits for test-time scoring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreOptions {
    pub max_iters: usize,
    /// Stop once no score entry moves by more than this.
    pub tol: f64,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions { max_iters: 50, tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceScore<T: Real> {
    pub c: DVector<T>,
    /// Gaussian predictive log density plus the categorical bound.
    pub log_pred: T,
    pub gaussian_log_pred: T,
    /// Lower bound on the categorical predictive log likelihood.
    pub multinomial_elbo: T,
    pub iterations: usize,
    pub converged: bool,
}

/// Read-only view of a model with the per-model quantities precomputed.
pub struct Scorer<'a, T: Real> {
    model: &'a FittedModel<T>,
    gaussian: Option<(&'a GaussianFeatureState<T>, GaussianScoreTerms<T>)>,
    multinomial: Vec<(MultinomialScoreTerms<T>, Curvature)>,
    options: ScoreOptions,
}

impl<'a, T: Real> Scorer<'a, T> {
    pub fn new(model: &'a FittedModel<T>) -> Result<Self> {
        Self::with_options(model, ScoreOptions::default())
    }

    pub fn with_options(model: &'a FittedModel<T>, options: ScoreOptions) -> Result<Self> {
        let gaussian = match (&model.state.gaussian, model.spec.gaussian_features) {
            (_, 0) => None,
            (Some(g), _) => Some((g, GaussianScoreTerms::new(g))),
            (None, _) => return Err(MmfaError::InvalidArgument("model has no fitted real-valued state".into())),
        };
        let multinomial = model
            .state
            .multinomial
            .iter()
            .map(|s| Ok((MultinomialScoreTerms::new(&s.posterior), Curvature::new(s.posterior.categories)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Scorer { model, gaussian, multinomial, options })
    }

    pub fn model(&self) -> &FittedModel<T> {
        self.model
    }

    fn check_instance(&self, x: &Instance<T>) -> Result<()> {
        let d1 = self.model.spec.gaussian_features;
        let got = x.gaussian.as_ref().map_or(0, |(v, _)| v.len());
        if got != d1 || x.gaussian.as_ref().is_some_and(|(v, o)| v.len() != o.len()) {
            return Err(MmfaError::DimensionMismatch(format!(
                "model expects {d1} real-valued features, instance has {got}"
            )));
        }
        if x.categorical.len() != self.multinomial.len() {
            return Err(MmfaError::DimensionMismatch(format!(
                "model expects {} categorical modalities, instance has {}",
                self.multinomial.len(),
                x.categorical.len()
            )));
        }
        for (m, ((z, _), (_, curv))) in x.categorical.iter().zip(&self.multinomial).enumerate() {
            if z.len() != curv.dim() {
                return Err(MmfaError::DimensionMismatch(format!(
                    "categorical modality {m}: expected {} categories, got {}",
                    curv.categories(),
                    z.len() + 1
                )));
            }
        }
        Ok(())
    }

    fn observed_anything(x: &Instance<T>) -> bool {
        x.gaussian.as_ref().is_some_and(|(_, o)| o.iter().any(|&b| b)) || x.categorical.iter().any(|(_, n)| *n > T::zero())
    }

    /// Solves the instance's score program on the frozen loading posteriors,
    /// iterating the per-entry variances and expansion points to a fixed point.
    pub fn score(&self, x: &Instance<T>) -> Result<InstanceScore<T>> {
        self.check_instance(x)?;
        if !Self::observed_anything(x) {
            return Err(MmfaError::Undefined("instance has no observed features".into()));
        }
        let spec = &self.model.spec;
        let k = spec.factors;
        let prior = &spec.noise_prior;
        let two = T::of(2.0);
        let denom = two * (prior.alpha + T::one()) + T::one();
        let prior_term = two / prior.beta;
        let floor = T::of(VARIANCE_FLOOR);
        let tol = T::of(self.options.tol);

        let mut c = DVector::<T>::zeros(k);
        let mut variances = vec![prior.mode(); spec.gaussian_features];
        let mut psi: Vec<Vec<T>> = self.multinomial.iter().map(|(_, cv)| vec![T::zero(); cv.dim()]).collect();
        let mut iterations = 0;
        let mut converged = false;

        while iterations < self.options.max_iters {
            iterations += 1;
            let mut h = DMatrix::zeros(k, k);
            let mut rho = DVector::zeros(k);
            if let (Some((state, terms)), Some((y, obs))) = (&self.gaussian, &x.gaussian) {
                terms.accumulate(state, |j| y[j], |j| obs[j], |j| variances[j], &mut h, &mut rho);
            }
            for (((terms, curv), st), ((z, n), ps)) in
                self.multinomial.iter().zip(&self.model.state.multinomial).zip(x.categorical.iter().zip(&psi))
            {
                let zt = adjusted_instance_counts(curv, z, *n, ps);
                terms.accumulate(&st.posterior, &zt, *n, &mut h, &mut rho);
            }
            let c_new = update_scores(&h, &rho, spec.score_update)?;

            if let (Some((state, _)), Some((y, obs))) = (&self.gaussian, &x.gaussian) {
                for j in 0..variances.len() {
                    if obs[j] {
                        let r = y[j] - state.means.column(j).dot(&c_new);
                        let v = (r * r + quad_form(&state.covariances[j], c_new.as_slice()) + prior_term) / denom;
                        variances[j] = if v < floor { floor } else { v };
                    }
                }
            }
            for (ps, st) in psi.iter_mut().zip(&self.model.state.multinomial) {
                let eta = st.posterior.phi.tr_mul(&c_new);
                ps.copy_from_slice(eta.as_slice());
            }
            let step = (&c_new - &c).amax();
            c = c_new;
            if step < tol {
                converged = true;
                break;
            }
        }

        let (gaussian_log_pred, multinomial_elbo) = self.log_pred_parts(x, &c, &psi);
        Ok(InstanceScore {
            c,
            log_pred: gaussian_log_pred + multinomial_elbo,
            gaussian_log_pred,
            multinomial_elbo,
            iterations,
            converged,
        })
    }

    fn log_pred_parts(&self, x: &Instance<T>, c: &DVector<T>, psi: &[Vec<T>]) -> (T, T) {
        let half = T::of(0.5);
        let ln_2pi = T::two_pi().ln();
        let mut gauss = T::zero();
        if let (Some((state, _)), Some((y, obs))) = (&self.gaussian, &x.gaussian) {
            let noise = self.model.spec.noise_prior.mode();
            for j in 0..y.len() {
                if obs[j] {
                    let s = quad_form(&state.covariances[j], c.as_slice()) + noise;
                    let r = y[j] - state.means.column(j).dot(c);
                    gauss -= half * (ln_2pi + s.ln()) + half * r * r / s;
                }
            }
        }
        let mut multi = T::zero();
        for (((_, curv), st), ((z, n), ps)) in
            self.multinomial.iter().zip(&self.model.state.multinomial).zip(x.categorical.iter().zip(psi))
        {
            let post = &st.posterior;
            let mean = post.phi.tr_mul(c);
            let cov_quad = (quad_form(&post.f_inv, c.as_slice()), quad_form(&post.delta, c.as_slice()));
            let mut scratch = vec![T::zero(); curv.dim()];
            multi += ln_multinomial_coefficient(z, *n);
            multi += expected_instance_bound(curv, z, *n, ps, mean.as_slice(), cov_quad, &mut scratch);
        }
        (gauss, multi)
    }
}

fn adjusted_instance_counts<T: Real>(curv: &Curvature, z: &[T], n: T, psi: &[T]) -> Vec<T> {
    let mut p = vec![T::zero(); z.len()];
    softmax_lse_into(psi, &mut p);
    let mut a_psi = vec![T::zero(); z.len()];
    curv.apply_into(psi, &mut a_psi);
    (0..z.len()).map(|d| z[d] - n * (p[d] - a_psi[d])).collect()
}

pub fn score_instance<T: Real>(model: &FittedModel<T>, x: &Instance<T>) -> Result<InstanceScore<T>> {
    Scorer::new(model)?.score(x)
}

/// Scores every instance of `data`; instances with nothing observed yield `None`.
pub fn score_dataset<T: Real>(model: &FittedModel<T>, data: &HeteroDataset<T>) -> Result<Vec<Option<InstanceScore<T>>>> {
    model.spec.check_data(data)?;
    let scorer = Scorer::new(model)?;
    (0..data.instances())
        .into_par_iter()
        .map(|i| match scorer.score(&data.instance(i)) {
            Ok(s) => Ok(Some(s)),
            Err(MmfaError::Undefined(_)) => Ok(None),
            Err(e) => Err(MmfaError::Numerical(format!("instance {i}: {e}"))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveLikelihood<T: Real> {
    pub total: T,
    /// Exact predictive log density of the real-valued entries.
    pub gaussian: T,
    /// Lower bound on the categorical predictive log likelihood.
    pub multinomial_elbo: T,
    /// Per-instance contributions; zero for instances with nothing observed.
    pub per_instance: Vec<T>,
    /// `K × P` test-time scores (zero columns where nothing was observed).
    pub scores: DMatrix<T>,
}

impl<T: Real> PredictiveLikelihood<T> {
    /// `"ELBO"` whenever the categorical bound contributes, else `"log-likelihood"`.
    pub fn label_for(has_categorical: bool) -> &'static str {
        if has_categorical {
            "ELBO"
        } else {
            "log-likelihood"
        }
    }
}

/// Predictive log likelihood of a test set: the real-valued loadings are
/// integrated out exactly with the prior-mode noise variance, the categorical
/// loadings under the bound, summed over instances.
pub fn predictive_log_likelihood<T: Real>(model: &FittedModel<T>, data: &HeteroDataset<T>) -> Result<PredictiveLikelihood<T>> {
    let scored = score_dataset(model, data)?;
    let k = model.spec.factors;
    let mut out = PredictiveLikelihood {
        total: T::zero(),
        gaussian: T::zero(),
        multinomial_elbo: T::zero(),
        per_instance: Vec::with_capacity(scored.len()),
        scores: DMatrix::zeros(k, scored.len()),
    };
    for (i, s) in scored.into_iter().enumerate() {
        match s {
            Some(s) => {
                out.gaussian += s.gaussian_log_pred;
                out.multinomial_elbo += s.multinomial_elbo;
                out.per_instance.push(s.log_pred);
                out.scores.set_column(i, &s.c);
            }
            None => out.per_instance.push(T::zero()),
        }
    }
    out.total = out.gaussian + out.multinomial_elbo;
    Ok(out)
}

/// Lower-tail `δ`-quantile with linear interpolation between order statistics.
pub fn lower_quantile<T: Real>(values: &[T], delta: T) -> Result<T> {
    if values.is_empty() {
        return Err(MmfaError::InvalidArgument("quantile of an empty set".into()));
    }
    if !(delta > T::zero() && delta < T::one()) {
        return Err(MmfaError::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let pos = delta * T::of_usize(sorted.len() - 1);
    let lo = pos.floor().as_f64() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - T::of_usize(lo);
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnomalyVerdict<T: Real> {
    pub log_likelihood: T,
    pub threshold: T,
    pub is_anomalous: bool,
    pub delta: T,
}

impl<T: Real> AnomalyVerdict<T> {
    pub fn new(log_likelihood: T, threshold: T, delta: T) -> Self {
        AnomalyVerdict { log_likelihood, threshold, is_anomalous: log_likelihood < threshold, delta }
    }
}

/// Threshold from the validation set's per-instance predictive likelihoods.
pub fn anomaly_threshold<T: Real>(model: &FittedModel<T>, validation: &HeteroDataset<T>, delta: T) -> Result<T> {
    if validation.instances() == 0 {
        return Err(MmfaError::InvalidArgument("validation set is empty".into()));
    }
    if !(delta > T::zero() && delta < T::one()) {
        return Err(MmfaError::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    if T::of_usize(validation.instances()) < T::one() / delta {
        log::warn!(
            "validation set has {} instances, fewer than 1/delta; the threshold is unreliable",
            validation.instances()
        );
    }
    let lls = predictive_log_likelihood(model, validation)?.per_instance;
    lower_quantile(&lls, delta)
}

pub fn anomaly_detect<T: Real>(
    model: &FittedModel<T>,
    validation: &HeteroDataset<T>,
    test: &Instance<T>,
    delta: T,
) -> Result<AnomalyVerdict<T>> {
    let threshold = anomaly_threshold(model, validation, delta)?;
    let ll = score_instance(model, test)?.log_pred;
    Ok(AnomalyVerdict::new(ll, threshold, delta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyReport<T: Real> {
    pub threshold: T,
    pub delta: T,
    /// `(instance, verdict)`, sorted by ascending log likelihood.
    pub verdicts: Vec<(usize, AnomalyVerdict<T>)>,
}

/// Verdicts for every instance of `test` against one threshold.
pub fn anomaly_scan<T: Real>(
    model: &FittedModel<T>,
    validation: &HeteroDataset<T>,
    test: &HeteroDataset<T>,
    delta: T,
) -> Result<AnomalyReport<T>> {
    let threshold = anomaly_threshold(model, validation, delta)?;
    let lls = predictive_log_likelihood(model, test)?.per_instance;
    let mut verdicts: Vec<(usize, AnomalyVerdict<T>)> =
        lls.into_iter().enumerate().map(|(i, ll)| (i, AnomalyVerdict::new(ll, threshold, delta))).collect();
    verdicts.sort_by(|a, b| {
        a.1.log_likelihood
            .partial_cmp(&b.1.log_likelihood)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok(AnomalyReport { threshold, delta, verdicts })
}

/// Predicted value `cᵀa_j` of real-valued feature `j` at scores `c`.
pub fn impute_with_scores<T: Real>(model: &FittedModel<T>, c: &DVector<T>, j: usize) -> Result<T> {
    let d1 = model.spec.gaussian_features;
    if j >= d1 {
        return Err(MmfaError::InvalidArgument(format!(
            "feature {j} is not one of the {d1} real-valued features; use category_probabilities"
        )));
    }
    let state = model
        .state
        .gaussian
        .as_ref()
        .ok_or_else(|| MmfaError::InvalidArgument("model has no fitted real-valued state".into()))?;
    if c.len() != model.spec.factors {
        return Err(MmfaError::DimensionMismatch(format!("score has length {}, model K = {}", c.len(), model.spec.factors)));
    }
    Ok(state.means.column(j).dot(c))
}

/// Predicted value of real-valued feature `j` for training instance `i`.
pub fn impute<T: Real>(model: &FittedModel<T>, i: usize, j: usize) -> Result<T> {
    if i >= model.scores().ncols() {
        return Err(MmfaError::InvalidArgument(format!("instance {i} out of range")));
    }
    impute_with_scores(model, &model.scores().column(i).into_owned(), j)
}

/// `softmax_pivot(Φ_mᵀ c)`.
pub fn category_probabilities_with_scores<T: Real>(model: &FittedModel<T>, c: &DVector<T>, m: usize) -> Result<Vec<T>> {
    let st = model.state.multinomial.get(m).ok_or_else(|| {
        MmfaError::InvalidArgument(format!("modality {m} is not one of the {} categorical modalities", model.state.multinomial.len()))
    })?;
    if c.len() != model.spec.factors {
        return Err(MmfaError::DimensionMismatch(format!("score has length {}, model K = {}", c.len(), model.spec.factors)));
    }
    softmax_pivot(st.posterior.phi.tr_mul(c).as_slice())
}

pub fn category_probabilities<T: Real>(model: &FittedModel<T>, i: usize, m: usize) -> Result<Vec<T>> {
    if i >= model.scores().ncols() {
        return Err(MmfaError::InvalidArgument(format!("instance {i} out of range")));
    }
    category_probabilities_with_scores(model, &model.scores().column(i).into_owned(), m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallReport {
    pub recall: f64,
    /// Users (real-valued features) with at least one liked test item.
    pub users: usize,
    /// Requested list length.
    pub k: usize,
    pub like_threshold: f64,
}

/// Recall@k from a `P × D₁` matrix of predicted ratings, treating instances
/// as items and real-valued features as users. Items observed in
/// `train_mask` are excluded from a user's ranking; ties rank the lower
/// instance index first.
pub fn recall_from_predictions<T: Real>(
    predictions: &DMatrix<T>,
    test: &GaussianBlock<T>,
    train_mask: Option<&ObservationMask>,
    k: usize,
    like_threshold: f64,
) -> Result<RecallReport> {
    if k == 0 {
        return Err(MmfaError::InvalidArgument("k must be at least 1".into()));
    }
    if predictions.shape() != test.values().shape() || train_mask.is_some_and(|m| m.shape() != predictions.shape()) {
        return Err(MmfaError::DimensionMismatch("predictions, test ratings and training mask must share a shape".into()));
    }
    let (p, users) = predictions.shape();
    let thr = T::of(like_threshold);
    let mut warned = false;

    let per_user: Vec<Option<f64>> = (0..users)
        .map(|j| {
            let mut candidates: Vec<usize> = (0..p).filter(|&i| !train_mask.is_some_and(|m| m.get(i, j))).collect();
            let liked = |i: usize| test.is_observed(i, j) && test.values()[(i, j)] >= thr;
            let total = candidates.iter().filter(|&&i| liked(i)).count();
            if total == 0 {
                return None;
            }
            if candidates.len() < k && !warned {
                log::warn!("k = {k} exceeds the catalog of unseen items; recall covers the full catalog");
                warned = true;
            }
            candidates.sort_by(|&a, &b| {
                predictions[(b, j)]
                    .partial_cmp(&predictions[(a, j)])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let hits = candidates.iter().take(k).filter(|&&i| liked(i)).count();
            Some(hits as f64 / total as f64)
        })
        .collect();
    let eligible: Vec<f64> = per_user.into_iter().flatten().collect();
    if eligible.is_empty() {
        return Err(MmfaError::Undefined("no user has a liked item in the test set".into()));
    }
    Ok(RecallReport {
        recall: eligible.iter().sum::<f64>() / eligible.len() as f64,
        users: eligible.len(),
        k,
        like_threshold,
    })
}

/// Recall@k with predicted ratings `c_iᵀa_j` from the fitted scores.
pub fn recall_at_k<T: Real>(
    model: &FittedModel<T>,
    test: &GaussianBlock<T>,
    train_mask: Option<&ObservationMask>,
    k: usize,
    like_threshold: f64,
) -> Result<RecallReport> {
    let state = model
        .state
        .gaussian
        .as_ref()
        .ok_or_else(|| MmfaError::InvalidArgument("recall needs a real-valued modality".into()))?;
    let predictions = model.scores().tr_mul(&state.means);
    recall_from_predictions(&predictions, test, train_mask, k, like_threshold)
}

/// Area under the ROC curve of `scores` for separating `positives`
/// (higher score means more likely positive); ties count one half.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(MmfaError::DimensionMismatch("scores and labels differ in length".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));
    let n_pos = positives.iter().filter(|&&b| b).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MmfaError::Undefined("AUC needs both classes".into()));
    }
    // Mann-Whitney with midranks.
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            end += 1;
        }
        let midrank = (start + end + 1) as f64 / 2.0;
        rank_sum += midrank * idx[start..end].iter().filter(|&&i| positives[i]).count() as f64;
        start = end;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::{fit, FitState, ModelSpec};
    use crate::gaussian::{InverseGammaPrior, NoiseVariances};
    use crate::multinomial::{MultinomialPosterior, MultinomialState};
    use crate::qp::ScoreUpdate;
    use crate::synth::{sample_dataset, CategoricalConfig, GeneratorConfig};
    use nalgebra::dvector;

    fn fitted(seed: u64) -> (HeteroDataset<f64>, FittedModel<f64>) {
        fitted_with(seed, ScoreUpdate::default())
    }

    fn fitted_with(seed: u64, update: ScoreUpdate<f64>) -> (HeteroDataset<f64>, FittedModel<f64>) {
        let cfg = GeneratorConfig {
            factors: 2,
            instances: 150,
            gaussian_features: 8,
            noise_variance: 1.0,
            categorical: vec![CategoricalConfig::constant(4, 30)],
            seed,
            ..Default::default()
        };
        let (data, _) = sample_dataset(&cfg).unwrap();
        let mut spec = ModelSpec::new(2, 8, vec![4]);
        spec.noise_prior = InverseGammaPrior::new(1.0, 0.5).unwrap();
        spec.score_update = update;
        spec.tol = 1e-12;
        spec.max_iters = 2000;
        let model = fit(&data, &spec).unwrap();
        (data, model)
    }

    fn hand_model(k: usize, means: DMatrix<f64>, cov: f64, prior: InverseGammaPrior<f64>) -> FittedModel<f64> {
        let d1 = means.ncols();
        let mut spec = ModelSpec::new(k, d1, vec![]);
        spec.noise_prior = prior;
        spec.score_update = ScoreUpdate::Unconstrained;
        let state = FitState {
            scores: DMatrix::zeros(k, 1),
            gaussian: Some(GaussianFeatureState {
                means,
                covariances: vec![DMatrix::identity(k, k) * cov; d1],
                log_det_covariances: vec![0.0; d1],
            }),
            noise: Some(NoiseVariances::constant(1, d1, prior.mode())),
            multinomial: vec![],
        };
        FittedModel { spec, state, objective_trace: vec![], iterations_run: 0, converged: true }
    }

    #[test]
    fn training_instances_reproduce_their_scores() {
        // A unit ridge pins the score scale, so the fit reaches its fixed point quickly.
        let (data, model) = fitted_with(11, ScoreUpdate::Ridge(1.0));
        assert!(model.converged);
        let scorer = Scorer::with_options(&model, ScoreOptions { max_iters: 5000, tol: 1e-12 }).unwrap();
        for i in 0..20 {
            let s = scorer.score(&data.instance(i)).unwrap();
            let diff = (&s.c - model.scores().column(i)).amax();
            assert!(diff < 1e-4, "instance {i}: {diff}");
        }
    }

    #[test]
    fn gaussian_only_scalar_solve() {
        // K = 1, B = 0: the fixed point solves c = Σ y a / Σ a² with equal variances.
        let model = hand_model(1, DMatrix::from_row_slice(1, 2, &[2.0, 1.0]), 0.0, InverseGammaPrior::default());
        let x = Instance { gaussian: Some((vec![4.0, 2.0], vec![true, true])), categorical: vec![] };
        let s = score_instance(&model, &x).unwrap();
        assert!((s.c[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn categorical_only_instance_is_finite() {
        let (data, model) = fitted(12);
        let mut x = data.instance(0);
        if let Some((_, obs)) = x.gaussian.as_mut() {
            obs.iter_mut().for_each(|b| *b = false);
        }
        let s = score_instance(&model, &x).unwrap();
        assert!(s.c.iter().all(|v| v.is_finite()));
        assert_eq!(s.gaussian_log_pred, 0.0);
    }

    #[test]
    fn nothing_observed_is_undefined() {
        let (data, model) = fitted(13);
        let mut x = data.instance(0);
        x.gaussian.as_mut().unwrap().1.iter_mut().for_each(|b| *b = false);
        x.categorical[0].1 = 0.0;
        x.categorical[0].0.iter_mut().for_each(|z| *z = 0.0);
        assert!(matches!(score_instance(&model, &x), Err(MmfaError::Undefined(_))));
    }

    #[test]
    fn wrong_dimensions_rejected() {
        let (data, model) = fitted(13);
        let mut x = data.instance(0);
        x.gaussian.as_mut().unwrap().0.pop();
        assert!(matches!(score_instance(&model, &x), Err(MmfaError::DimensionMismatch(_))));
    }

    #[test]
    fn point_mass_posterior_gives_plain_gaussian_density() {
        // prior mode 1/(β(α+1)) = 2
        let prior = InverseGammaPrior::new(1.0, 0.25).unwrap();
        let means = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.5, 0.0, 1.0, -1.0]);
        let model = hand_model(2, means.clone(), 0.0, prior);
        let x = Instance { gaussian: Some((vec![0.3, -1.2, 2.0], vec![true, true, true])), categorical: vec![] };
        let s = score_instance(&model, &x).unwrap();
        let mut expect = 0.0;
        for j in 0..3 {
            let mu = means.column(j).dot(&s.c);
            let r = x.gaussian.as_ref().unwrap().0[j] - mu;
            expect += -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln() - r * r / 4.0;
        }
        assert!((s.log_pred - expect).abs() < 1e-12);
    }

    #[test]
    fn categorical_bound_below_quadrature() {
        // K = 1, D₂ = 2, N = 1: q(v) = N(φ, ω) is one-dimensional.
        let phi: f64 = 0.7;
        let f: f64 = 9.0;
        let mut spec = ModelSpec::<f64>::new(1, 0, vec![2]);
        spec.score_update = ScoreUpdate::Unconstrained;
        // m = 1: Ω = (F + I)/D₂ inverse... build through the structured fields.
        let f_inv = 1.0 / f;
        let delta = (1.0 - f_inv) / (f + 1.0);
        let omega = f_inv + delta;
        let post = MultinomialPosterior {
            categories: 2,
            f: DMatrix::from_element(1, 1, f),
            f_inv: DMatrix::from_element(1, 1, f_inv),
            delta: DMatrix::from_element(1, 1, delta),
            phi: DMatrix::from_element(1, 1, phi),
            log_det_cov: omega.ln(),
        };
        let model = FittedModel {
            spec,
            state: FitState {
                scores: DMatrix::zeros(1, 1),
                gaussian: None,
                noise: None,
                multinomial: vec![MultinomialState { posterior: post, psi: DMatrix::zeros(1, 1) }],
            },
            objective_trace: vec![],
            iterations_run: 0,
            converged: true,
        };
        let scorer = Scorer::new(&model).unwrap();
        for z in [0.0, 1.0] {
            let x = Instance { gaussian: None, categorical: vec![(vec![z], 1.0)] };
            let s = scorer.score(&x).unwrap();
            let c = s.c[0];
            // log ∫ p(z | v c) N(v; φ, ω) dv by the trapezoid rule
            let sd = omega.sqrt();
            let (lo, hi, n) = (phi - 12.0 * sd, phi + 12.0 * sd, 20_000);
            let h = (hi - lo) / n as f64;
            let mut acc = 0.0;
            for t in 0..=n {
                let v = lo + t as f64 * h;
                let eta = v * c;
                let p1 = 1.0 / (1.0 + (-eta).exp());
                let lik = if z == 1.0 { p1 } else { 1.0 - p1 };
                let dens = (-(v - phi).powi(2) / (2.0 * omega)).exp() / (2.0 * std::f64::consts::PI * omega).sqrt();
                let w = if t == 0 || t == n { 0.5 } else { 1.0 };
                acc += w * lik * dens * h;
            }
            let exact = acc.ln();
            assert!(s.multinomial_elbo <= exact + 1e-9, "{} > {exact}", s.multinomial_elbo);
            assert!(exact - s.multinomial_elbo < 0.1, "gap {}", exact - s.multinomial_elbo);
        }
    }

    #[test]
    fn predictive_likelihood_is_additive() {
        let (data, model) = fitted(14);
        let whole = predictive_log_likelihood(&model, &data).unwrap();
        let a: Vec<usize> = (0..70).collect();
        let b: Vec<usize> = (70..150).collect();
        let pa = predictive_log_likelihood(&model, &data.subset(&a)).unwrap();
        let pb = predictive_log_likelihood(&model, &data.subset(&b)).unwrap();
        assert_eq!(whole.per_instance[..70], pa.per_instance[..]);
        assert!((whole.total - pa.total - pb.total).abs() <= 1e-9 * whole.total.abs());
        assert!(whole.total.is_finite());
    }

    #[test]
    fn quantile_rules() {
        assert_eq!(lower_quantile(&[3.0, 1.0, 2.0], 0.5).unwrap(), 2.0);
        assert_eq!(lower_quantile(&[1.0, 2.0], 0.25).unwrap(), 1.25);
        assert!(lower_quantile::<f64>(&[], 0.5).is_err());
        assert!(lower_quantile(&[1.0], 1.0).is_err());
        let v = AnomalyVerdict::new(2.0, 2.0, 0.05);
        assert!(!v.is_anomalous);
    }

    #[test]
    fn median_instance_is_not_anomalous() {
        let (data, model) = fitted(15);
        let lls = predictive_log_likelihood(&model, &data).unwrap().per_instance;
        let mut order: Vec<usize> = (0..lls.len()).collect();
        order.sort_by(|&a, &b| lls[a].partial_cmp(&lls[b]).unwrap());
        let median = order[lls.len() / 2];
        let v = anomaly_detect(&model, &data, &data.instance(median), 0.05).unwrap();
        assert!(!v.is_anomalous);
        assert!(v.log_likelihood > v.threshold);
    }

    #[test]
    fn impute_examples() {
        let model = hand_model(2, DMatrix::from_row_slice(2, 1, &[3.0, -1.0]), 0.0, InverseGammaPrior::default());
        assert_eq!(impute_with_scores(&model, &dvector![1.0, 2.0], 0).unwrap(), 1.0);
        assert_eq!(impute_with_scores(&model, &dvector![0.0, 0.0], 0).unwrap(), 0.0);
        assert!(matches!(impute_with_scores(&model, &dvector![1.0, 2.0], 1), Err(MmfaError::InvalidArgument(_))));
    }

    #[test]
    fn category_probability_examples() {
        let (_, model) = fitted(16);
        let p = category_probabilities_with_scores(&model, &dvector![0.0, 0.0], 0).unwrap();
        for &x in &p {
            assert!((x - 0.25).abs() < 1e-15);
        }
        let eta = model.state.multinomial[0].posterior.phi.tr_mul(&model.scores().column(3));
        let manual: Vec<f64> = {
            let e: Vec<f64> = eta.iter().map(|x| x.exp()).collect();
            let z = 1.0 + e.iter().sum::<f64>();
            e.iter().map(|x| x / z).chain(std::iter::once(1.0 / z)).collect()
        };
        let got = category_probabilities(&model, 3, 0).unwrap();
        for (a, b) in got.iter().zip(&manual) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(category_probabilities(&model, 0, 1).is_err());
    }

    #[test]
    fn log_two_gives_two_thirds() {
        let p = softmax_pivot(&[2.0f64.ln()]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn recall_single_liked_item_ranked_first() {
        let preds = DMatrix::from_column_slice(4, 1, &[0.1, 0.9, 0.3, 0.2]);
        let mut mask = ObservationMask::all_observed(4, 1);
        mask.set(0, 0, false);
        mask.set(2, 0, false);
        mask.set(3, 0, false);
        let test = GaussianBlock::new(DMatrix::from_column_slice(4, 1, &[0.0, 5.0, 0.0, 0.0]), Some(mask)).unwrap();
        let r = recall_from_predictions(&preds, &test, None, 10, 4.0).unwrap();
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.users, 1);
    }

    #[test]
    fn recall_needs_eligible_users() {
        let preds = DMatrix::from_element(3, 2, 1.0);
        let test = GaussianBlock::new(DMatrix::from_element(3, 2, 1.0), None).unwrap();
        assert!(matches!(recall_from_predictions(&preds, &test, None, 2, 4.0), Err(MmfaError::Undefined(_))));
        assert!(recall_from_predictions(&preds, &test, None, 0, 4.0).is_err());
    }

    #[test]
    fn constant_predictions_match_random_order() {
        // With ties broken by index and liked items placed uniformly at random,
        // recall@k averages to k / catalog.
        use rand::{Rng, SeedableRng};
        let (p, users, k) = (50, 40, 10);
        let mut total = 0.0;
        let seeds = 30;
        for seed in 0..seeds {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values = DMatrix::from_fn(p, users, |_, _| if rng.random::<f64>() < 0.2 { 5.0 } else { 1.0 });
            let test = GaussianBlock::new(values, None).unwrap();
            let r = recall_from_predictions(&DMatrix::from_element(p, users, 0.0), &test, None, k, 4.0).unwrap();
            total += r.recall;
        }
        let mean = total / seeds as f64;
        assert!((mean - k as f64 / p as f64).abs() < 0.03, "{mean}");
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.9, 0.8], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert!(roc_auc(&[1.0], &[true]).is_err());
    }
}
