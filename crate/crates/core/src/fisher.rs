//! Fisher information of a single score vector and the resulting
//! Cramér–Rao bound, plus the score-MSE experiment that compares a fit
//! against it.
//!
//! The real-valued part is analytic. The categorical part has no closed
//! form once the loadings are integrated out and is estimated by Monte Carlo
//! over loading draws, with all likelihood ratios computed in log space.

use std::sync::Once;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::HeteroDataset;
use crate::dataset_io::fmt_f64;
use crate::error::{MmfaError, Result};
use crate::expfam::{lse, softmax_pivot};
use crate::fit::{fit_with_observer, ModelSpec};
use crate::gaussian::InverseGammaPrior;
use crate::linalg::{spd_factor, symmetrize};
use crate::multinomial::{adjusted_counts, multinomial_e_step, psi_update};
use crate::qp::ScoreUpdate;
use crate::synth::{sample_dataset, sample_multinomial, CategoricalConfig, GeneratorConfig, GroundTruth};

/// Below this many replicates the Monte Carlo estimate is flagged as noisy.
pub const FEW_REPLICATES: usize = 100;

/// Distribution of the real-valued loadings: `u_j ~ N(means_j, covariances_j)`
/// with noise variance `noise_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPriors {
    /// `K × D₁`.
    pub means: DMatrix<f64>,
    pub covariances: Vec<DMatrix<f64>>,
    pub noise: Vec<f64>,
}

/// `Σ_j μ_jμ_jᵀ/s_j + 2 Σ_jc cᵀΣ_j/s_j²` with `s_j = cᵀΣ_jc + σ²_j`.
pub fn gaussian_fisher(c: &DVector<f64>, priors: &GaussianPriors) -> Result<DMatrix<f64>> {
    let k = c.len();
    let d1 = priors.means.ncols();
    if priors.means.nrows() != k || priors.covariances.len() != d1 || priors.noise.len() != d1 {
        return Err(MmfaError::DimensionMismatch("gaussian priors do not match the score length".into()));
    }
    let mut out = DMatrix::zeros(k, k);
    for j in 0..d1 {
        let sigma = &priors.covariances[j];
        if sigma.shape() != (k, k) {
            return Err(MmfaError::DimensionMismatch(format!("covariance {j} is not {k}x{k}")));
        }
        if !(priors.noise[j] > 0.0) {
            return Err(MmfaError::InvalidArgument(format!("noise variance {j} must be positive")));
        }
        let sc = sigma * c;
        let s = c.dot(&sc) + priors.noise[j];
        let mu = priors.means.column(j);
        out += mu * mu.transpose() / s;
        out += &sc * sc.transpose() * (2.0 / (s * s));
    }
    symmetrize(&mut out);
    Ok(out)
}

/// Distribution the Monte Carlo estimator draws the categorical loadings
/// `V = [v_1 … v_{D−1}]` from.
#[derive(Debug, Clone)]
pub enum LoadingPrior {
    /// `v_d ~ N(0, I_K)` independently.
    StandardNormal,
    /// `vec(V) ~ N(vec(mean), LLᵀ)`, with `vec` stacking `v_1, v_2, …`.
    Gaussian { mean: DMatrix<f64>, factor: DMatrix<f64> },
}

impl LoadingPrior {
    pub fn gaussian(mean: DMatrix<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.shape() != (n, n) {
            return Err(MmfaError::DimensionMismatch(format!("loading covariance must be {n}x{n}")));
        }
        let chol: Cholesky<f64, Dyn> = spd_factor(cov, "loading covariance")?;
        Ok(LoadingPrior::Gaussian { mean, factor: chol.l() })
    }

    /// `mean` with isotropic variance `variance`.
    pub fn isotropic(mean: DMatrix<f64>, variance: f64) -> Result<Self> {
        let n = mean.len();
        LoadingPrior::gaussian(mean, &(DMatrix::identity(n, n) * variance))
    }

    fn draw<R: Rng>(&self, rng: &mut R, k: usize, m: usize) -> Result<DMatrix<f64>> {
        let xi = DMatrix::from_fn(k, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        match self {
            LoadingPrior::StandardNormal => Ok(xi),
            LoadingPrior::Gaussian { mean, factor } => {
                if mean.shape() != (k, m) {
                    return Err(MmfaError::DimensionMismatch(format!("loading mean must be {k}x{m}")));
                }
                let v = factor * DVector::from_column_slice(xi.as_slice());
                Ok(mean + DMatrix::from_column_slice(k, m, v.as_slice()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultinomialFisherConfig {
    pub trials: u32,
    pub categories: usize,
    pub replicates: usize,
    pub seed: u64,
}

/// Monte Carlo Fisher information of `c` under `z ~ Multinomial(N, p(V, c))`
/// with `V` drawn from `prior`.
///
/// For replicate draws `V_r` and `z_r ~ Multinomial(N, p_r)`, the marginal
/// score at `z_r` is estimated by `Σ_s ℓ_rs λ_rs / Σ_s ℓ_rs`, where
/// `ℓ_rs = Multinomial(z_r | N, p_s)` and `λ_rs = V_s(z_r − N p_s)`; the
/// estimate is the average outer product of these scores. Only ratios of
/// `ℓ_rs` within a row enter, so each row is shifted by its maximum log value.
pub fn multinomial_fisher_mc(c: &DVector<f64>, config: &MultinomialFisherConfig, prior: &LoadingPrior) -> Result<DMatrix<f64>> {
    let MultinomialFisherConfig { trials, categories, replicates: r, seed } = *config;
    if r < 2 {
        return Err(MmfaError::InvalidArgument("need at least 2 replicates".into()));
    }
    if trials < 1 {
        return Err(MmfaError::InvalidArgument("need at least one trial".into()));
    }
    if categories < 2 {
        return Err(MmfaError::InvalidArgument("need at least 2 categories".into()));
    }
    if r < FEW_REPLICATES {
        static WARNED: Once = Once::new();
        WARNED.call_once(|| log::warn!("{r} replicates: the Fisher estimate has a wide Monte Carlo error"));
    }
    let k = c.len();
    let m = categories - 1;
    let n = trials as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut loadings = Vec::with_capacity(r);
    for _ in 0..r {
        loadings.push(prior.draw(&mut rng, k, m)?);
    }
    let mut probs = DMatrix::zeros(r, categories);
    let mut log_probs = DMatrix::zeros(r, categories);
    for (s, v) in loadings.iter().enumerate() {
        let eta: Vec<f64> = v.tr_mul(c).iter().copied().collect();
        let p = softmax_pivot(&eta)?;
        let l = lse(&eta)?;
        for d in 0..categories {
            probs[(s, d)] = p[d];
            log_probs[(s, d)] = if d < m { eta[d] - l } else { -l };
        }
    }
    let mut counts = DMatrix::zeros(r, categories);
    for s in 0..r {
        let z = sample_multinomial(&mut rng, trials, probs.row(s).transpose().as_slice());
        for d in 0..categories {
            counts[(s, d)] = z[d] as f64;
        }
    }

    // Log likelihoods up to a per-row constant (the multinomial coefficient).
    let log_lik = &counts * log_probs.transpose();
    let weights_rows: Vec<Result<Vec<f64>>> = (0..r)
        .into_par_iter()
        .map(|row| {
            let lr = log_lik.row(row);
            let top = lr.max();
            if !top.is_finite() {
                return Err(MmfaError::Numerical(
                    "every cross-likelihood underflowed; use more replicates or fewer trials".into(),
                ));
            }
            Ok(lr.iter().map(|&x| (x - top).exp()).collect())
        })
        .collect();
    let mut weights = DMatrix::zeros(r, r);
    for (row, w) in weights_rows.into_iter().enumerate() {
        for (s, x) in w?.into_iter().enumerate() {
            weights[(row, s)] = x;
        }
    }

    // Row s of `flat` is vec(V_s); row s of `g` is V_s p_s (non-pivot part).
    let flat = DMatrix::from_fn(r, k * m, |s, idx| loadings[s].as_slice()[idx]);
    let g = DMatrix::from_fn(r, k, |s, row| (0..m).map(|d| loadings[s][(row, d)] * probs[(s, d)]).sum::<f64>());
    let wv = &weights * &flat;
    let wg = &weights * &g;
    let totals: Vec<f64> = weights.row_iter().map(|row| row.sum()).collect();

    let mut fisher = DMatrix::zeros(k, k);
    for row in 0..r {
        let mut score = DVector::<f64>::zeros(k);
        for d in 0..m {
            let z = counts[(row, d)];
            if z != 0.0 {
                for q in 0..k {
                    score[q] += wv[(row, q + k * d)] * z;
                }
            }
        }
        for q in 0..k {
            score[q] = (score[q] - n * wg[(row, q)]) / totals[row];
        }
        fisher += &score * score.transpose();
    }
    fisher /= r as f64;
    symmetrize(&mut fisher);
    Ok(fisher)
}

/// Fisher information with the loadings known:
/// `N(Σ_d p_d v_dv_dᵀ − v̄v̄ᵀ)`, `v̄ = Σ_d p_d v_d`.
pub fn conditional_multinomial_fisher(c: &DVector<f64>, loadings: &DMatrix<f64>, trials: u32) -> Result<DMatrix<f64>> {
    if loadings.nrows() != c.len() {
        return Err(MmfaError::DimensionMismatch("loadings do not match the score length".into()));
    }
    let eta: Vec<f64> = loadings.tr_mul(c).iter().copied().collect();
    let p = softmax_pivot(&eta)?;
    let k = c.len();
    let mut second = DMatrix::zeros(k, k);
    let mut mean = DVector::zeros(k);
    for (d, v) in loadings.column_iter().enumerate() {
        second += v * v.transpose() * p[d];
        mean += v * p[d];
    }
    let mut out = (second - &mean * mean.transpose()) * trials as f64;
    symmetrize(&mut out);
    Ok(out)
}

/// `trace(M⁻¹)` for a symmetric positive definite `M`.
pub fn trace_inverse(m: &DMatrix<f64>) -> Result<f64> {
    let chol = Cholesky::new(m.clone()).ok_or_else(|| MmfaError::Numerical("Fisher information is singular".into()))?;
    Ok(chol.inverse().trace())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherResult {
    pub gaussian: DMatrix<f64>,
    pub multinomial: DMatrix<f64>,
    /// `trace((F_g + F_m)⁻¹)`.
    pub crlb: f64,
    /// `trace(F_g⁻¹)`, infinite when `F_g` is singular.
    pub crlb_gaussian: f64,
    /// `trace(F_m⁻¹)`, infinite when `F_m` is singular.
    pub crlb_multinomial: f64,
    pub replicates: usize,
}

/// Combines per-modality Fisher matrices into the bound; errors when the sum
/// is singular.
pub fn crlb_from_parts(gaussian: DMatrix<f64>, multinomial: DMatrix<f64>, replicates: usize) -> Result<FisherResult> {
    let total = &gaussian + &multinomial;
    let crlb = trace_inverse(&total)?;
    let single = |f: &DMatrix<f64>| trace_inverse(f).unwrap_or(f64::INFINITY);
    Ok(FisherResult {
        crlb_gaussian: single(&gaussian),
        crlb_multinomial: single(&multinomial),
        gaussian,
        multinomial,
        crlb,
        replicates,
    })
}

/// Bound for one score vector; each categorical modality contributes its
/// Monte Carlo Fisher information.
pub fn crlb(
    c: &DVector<f64>,
    gaussian: Option<&GaussianPriors>,
    multinomial: &[(MultinomialFisherConfig, LoadingPrior)],
) -> Result<FisherResult> {
    let k = c.len();
    let fg = match gaussian {
        Some(g) => gaussian_fisher(c, g)?,
        None => DMatrix::zeros(k, k),
    };
    let mut fm = DMatrix::zeros(k, k);
    let mut replicates = 0;
    for (cfg, prior) in multinomial {
        fm += multinomial_fisher_mc(c, cfg, prior)?;
        replicates = replicates.max(cfg.replicates);
    }
    crlb_from_parts(fg, fm, replicates)
}

/// Which loading distribution the bound integrates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrlbLoadings {
    /// Posterior of the loadings given the true scores, centred on the true
    /// loadings.
    #[default]
    OraclePosterior,
    /// The `N(0, I)` generative prior.
    StandardNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MseExperimentConfig {
    pub instances: usize,
    pub gaussian_features: usize,
    pub categories: usize,
    pub trials: u32,
    pub factors: usize,
    pub ridge: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Monte Carlo replicates per Fisher estimate.
    pub replicates: usize,
    /// EM iterations tracked per run.
    pub iterations: usize,
    /// Independent datasets, seeded `seed, seed + 1, …`.
    pub runs: usize,
    pub seed: u64,
    /// Noise variance of the generated data; the prior mode when absent.
    pub noise_variance: Option<f64>,
    pub loadings: CrlbLoadings,
}

impl Default for MseExperimentConfig {
    fn default() -> Self {
        MseExperimentConfig {
            instances: 100,
            gaussian_features: 5,
            categories: 5,
            trials: 40,
            factors: 3,
            ridge: 1e-6,
            alpha: 1.0,
            beta: 0.1,
            replicates: 2000,
            iterations: 100,
            runs: 10,
            seed: 0,
            noise_variance: None,
            loadings: CrlbLoadings::OraclePosterior,
        }
    }
}

impl MseExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 || self.factors == 0 || self.runs == 0 || self.iterations == 0 {
            return Err(MmfaError::InvalidArgument("instances, factors, runs and iterations must be positive".into()));
        }
        if self.gaussian_features == 0 && self.categories == 0 {
            return Err(MmfaError::InvalidArgument("at least one modality is required".into()));
        }
        if self.categories == 1 {
            return Err(MmfaError::InvalidArgument("a categorical modality needs at least 2 categories".into()));
        }
        InverseGammaPrior::new(self.alpha, self.beta)?;
        Ok(())
    }

    pub fn noise(&self) -> f64 {
        self.noise_variance.unwrap_or(1.0 / (self.beta * (self.alpha + 1.0)))
    }

    fn generator(&self, run: usize) -> GeneratorConfig {
        GeneratorConfig {
            factors: self.factors,
            instances: self.instances,
            gaussian_features: self.gaussian_features,
            noise_variance: self.noise(),
            categorical: if self.categories >= 2 {
                vec![CategoricalConfig::constant(self.categories, self.trials)]
            } else {
                vec![]
            },
            seed: self.seed + run as u64,
            ..GeneratorConfig::default()
        }
    }

    fn model_spec(&self, run: usize) -> ModelSpec<f64> {
        let cats = if self.categories >= 2 { vec![self.categories] } else { vec![] };
        let mut spec = ModelSpec::new(self.factors, self.gaussian_features, cats);
        spec.noise_prior = InverseGammaPrior { alpha: self.alpha, beta: self.beta };
        spec.score_update = ScoreUpdate::Ridge(self.ridge);
        spec.max_iters = self.iterations;
        spec.tol = f64::MIN_POSITIVE;
        spec.seed = self.seed + run as u64;
        spec
    }
}

/// Loading distributions for the bound of one generated dataset.
fn bound_priors(
    cfg: &MseExperimentConfig,
    data: &HeteroDataset<f64>,
    truth: &GroundTruth,
) -> Result<(Option<GaussianPriors>, Option<LoadingPrior>)> {
    let k = cfg.factors;
    let noise = cfg.noise();
    let gaussian = (cfg.gaussian_features > 0).then(|| match cfg.loadings {
        CrlbLoadings::StandardNormal => GaussianPriors {
            means: DMatrix::zeros(k, cfg.gaussian_features),
            covariances: vec![DMatrix::identity(k, k); cfg.gaussian_features],
            noise: vec![noise; cfg.gaussian_features],
        },
        CrlbLoadings::OraclePosterior => {
            let precision = &truth.scores * truth.scores.transpose() / noise + DMatrix::identity(k, k);
            let mut cov = precision.try_inverse().expect("identity-shifted Gram matrix is invertible");
            symmetrize(&mut cov);
            GaussianPriors {
                means: truth.gaussian_loadings.clone(),
                covariances: vec![cov; cfg.gaussian_features],
                noise: vec![noise; cfg.gaussian_features],
            }
        }
    });
    let multinomial = match (cfg.categories >= 2, cfg.loadings) {
        (false, _) => None,
        (true, CrlbLoadings::StandardNormal) => Some(LoadingPrior::StandardNormal),
        (true, CrlbLoadings::OraclePosterior) => {
            let block = &data.categorical()[0];
            let v = &truth.categorical_loadings[0];
            let psi = psi_update(v, &truth.scores)?;
            let zt = adjusted_counts(block, &psi)?;
            let post = multinomial_e_step(&truth.scores, block.trials(), &zt, cfg.categories)?;
            Some(LoadingPrior::gaussian(v.clone(), &post.dense_covariance())?)
        }
    };
    Ok((gaussian, multinomial))
}

/// Per-instance bounds averaged over the instances of one dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrlbSummary {
    pub run: usize,
    pub seed: u64,
    pub total: f64,
    pub gaussian: f64,
    pub multinomial: f64,
}

fn run_bounds(cfg: &MseExperimentConfig, run: usize, data: &HeteroDataset<f64>, truth: &GroundTruth) -> Result<CrlbSummary> {
    let (gp, lp) = bound_priors(cfg, data, truth)?;
    let seed = cfg.seed + run as u64;
    let mut acc = (0.0, 0.0, 0.0);
    for i in 0..cfg.instances {
        let c = truth.scores.column(i).into_owned();
        let multi: Vec<(MultinomialFisherConfig, LoadingPrior)> = lp
            .iter()
            .map(|p| {
                let mc = MultinomialFisherConfig {
                    trials: cfg.trials,
                    categories: cfg.categories,
                    replicates: cfg.replicates,
                    seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                };
                (mc, p.clone())
            })
            .collect();
        let res = crlb(&c, gp.as_ref(), &multi)?;
        acc.0 += res.crlb;
        acc.1 += res.crlb_gaussian;
        acc.2 += res.crlb_multinomial;
    }
    let p = cfg.instances as f64;
    Ok(CrlbSummary { run, seed, total: acc.0 / p, gaussian: acc.1 / p, multinomial: acc.2 / p })
}

/// The bound for every run of the experiment, without fitting.
pub fn experiment_bounds(cfg: &MseExperimentConfig) -> Result<Vec<CrlbSummary>> {
    cfg.validate()?;
    (0..cfg.runs)
        .map(|run| {
            let (data, truth) = sample_dataset(&cfg.generator(run))?;
            run_bounds(cfg, run, &data, &truth)
        })
        .collect()
}

/// Rotation `R` minimizing `‖R·estimate − truth‖_F` (both `K × P`).
pub fn procrustes_rotation(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = (truth * estimate.transpose()).svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᵀ");
    u * vt
}

/// Mean over instances of `‖R ĉ_i − c_i‖²` after Procrustes alignment.
pub fn aligned_mse(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    let r = procrustes_rotation(estimate, truth);
    (r * estimate - truth).norm_squared() / truth.ncols() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseRow {
    pub iteration: usize,
    pub mse_mean: f64,
    pub mse_stderr: f64,
    pub crlb_total: f64,
    pub crlb_gaussian: f64,
    pub crlb_multinomial: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseExperimentResult {
    pub rows: Vec<MseRow>,
    pub bounds: Vec<CrlbSummary>,
    /// `mse[run][iteration − 1]`.
    pub mse: Vec<Vec<f64>>,
}

impl MseExperimentResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,mse_mean,mse_stderr,crlb_total,crlb_gaussian,crlb_multinomial\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iteration,
                fmt_f64(r.mse_mean),
                fmt_f64(r.mse_stderr),
                fmt_f64(r.crlb_total),
                fmt_f64(r.crlb_gaussian),
                fmt_f64(r.crlb_multinomial)
            ));
        }
        out
    }
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Generates data, fits it for `iterations` EM steps while recording the
/// Procrustes-aligned score MSE, and reports it next to the bounds. A run
/// that converges early repeats its last MSE.
pub fn mse_experiment(cfg: &MseExperimentConfig) -> Result<MseExperimentResult> {
    cfg.validate()?;
    let mut curves = Vec::with_capacity(cfg.runs);
    let mut bounds = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let (data, truth) = sample_dataset(&cfg.generator(run))?;
        let mut curve = Vec::with_capacity(cfg.iterations);
        fit_with_observer(&data, &cfg.model_spec(run), |_, state| curve.push(aligned_mse(&state.scores, &truth.scores)))?;
        let last = *curve.last().expect("at least one iteration");
        curve.resize(cfg.iterations, last);
        curves.push(curve);
        bounds.push(run_bounds(cfg, run, &data, &truth)?);
    }
    let avg = |f: fn(&CrlbSummary) -> f64| bounds.iter().map(f).sum::<f64>() / bounds.len() as f64;
    let (ct, cg, cm) = (avg(|b| b.total), avg(|b| b.gaussian), avg(|b| b.multinomial));
    let rows = (0..cfg.iterations)
        .map(|t| {
            let at: Vec<f64> = curves.iter().map(|c| c[t]).collect();
            let (mse_mean, mse_stderr) = mean_stderr(&at);
            MseRow { iteration: t + 1, mse_mean, mse_stderr, crlb_total: ct, crlb_gaussian: cg, crlb_multinomial: cm }
        })
        .collect();
    Ok(MseExperimentResult { rows, bounds, mse: curves })
}

/// Bound table for `crlb --config`.
pub fn bounds_csv(bounds: &[CrlbSummary]) -> String {
    let mut out = String::from("run,seed,crlb_total,crlb_gaussian,crlb_multinomial\n");
    for b in bounds {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            b.run,
            b.seed,
            fmt_f64(b.total),
            fmt_f64(b.gaussian),
            fmt_f64(b.multinomial)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn min_eig(m: &DMatrix<f64>) -> f64 {
        m.clone().symmetric_eigen().eigenvalues.min()
    }

    #[test]
    fn gaussian_fisher_examples() {
        let one = GaussianPriors { means: dmatrix![1.0], covariances: vec![dmatrix![0.0]], noise: vec![1.0] };
        assert_eq!(gaussian_fisher(&dvector![0.7], &one).unwrap()[(0, 0)], 1.0);
        let var = GaussianPriors { means: dmatrix![0.0], covariances: vec![dmatrix![1.0]], noise: vec![1.0] };
        assert_eq!(gaussian_fisher(&dvector![1.0], &var).unwrap()[(0, 0)], 0.5);
    }

    #[test]
    fn gaussian_fisher_matches_score_outer_products() {
        // E[s sᵀ] for y ~ N(cᵀμ, cᵀΣc + σ²), score by central differences in c.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 2;
        let means = randn(&mut rng, k, 3);
        let covs: Vec<DMatrix<f64>> = (0..3)
            .map(|_| {
                let a = randn(&mut rng, k, k);
                &a * a.transpose() * 0.3
            })
            .collect();
        let noise = vec![0.5, 1.0, 0.8];
        let pri = GaussianPriors { means: means.clone(), covariances: covs.clone(), noise: noise.clone() };
        let c = dvector![0.6, -0.9];
        let exact = gaussian_fisher(&c, &pri).unwrap();

        let log_dens = |cc: &DVector<f64>, j: usize, y: f64| {
            let s = cc.dot(&(&covs[j] * cc)) + noise[j];
            let r = y - means.column(j).dot(cc);
            -0.5 * (2.0 * std::f64::consts::PI * s).ln() - r * r / (2.0 * s)
        };
        let draws = 200_000;
        let h = 1e-5;
        let mut est = DMatrix::zeros(k, k);
        for _ in 0..draws {
            for j in 0..3 {
                let s = c.dot(&(&covs[j] * &c)) + noise[j];
                let y = means.column(j).dot(&c) + s.sqrt() * rng.sample::<f64, _>(StandardNormal);
                let mut score = DVector::zeros(k);
                for q in 0..k {
                    let mut up = c.clone();
                    let mut dn = c.clone();
                    up[q] += h;
                    dn[q] -= h;
                    score[q] = (log_dens(&up, j, y) - log_dens(&dn, j, y)) / (2.0 * h);
                }
                est += &score * score.transpose();
            }
        }
        est /= draws as f64;
        let rel = (&est - &exact).norm() / exact.norm();
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn mc_fisher_is_symmetric_psd_and_seeded() {
        let c = dvector![0.4, -0.2, 0.9];
        let cfg = MultinomialFisherConfig { trials: 40, categories: 5, replicates: 300, seed: 8 };
        let a = multinomial_fisher_mc(&c, &cfg, &LoadingPrior::StandardNormal).unwrap();
        let b = multinomial_fisher_mc(&c, &cfg, &LoadingPrior::StandardNormal).unwrap();
        assert_eq!(a, b);
        assert!((&a - a.transpose()).amax() <= 1e-12);
        assert!(min_eig(&a) >= -1e-10);
    }

    #[test]
    fn mc_fisher_handles_large_counts() {
        let c = dvector![1.5, -1.0];
        let cfg = MultinomialFisherConfig { trials: 100, categories: 10, replicates: 200, seed: 1 };
        let f = multinomial_fisher_mc(&c, &cfg, &LoadingPrior::StandardNormal).unwrap();
        assert!(f.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn near_point_mass_prior_matches_conditional_fisher() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = randn(&mut rng, 3, 4);
        let c = dvector![0.3, 0.5, -0.4];
        let prior = LoadingPrior::isotropic(v.clone(), 1e-6).unwrap();
        let cfg = MultinomialFisherConfig { trials: 40, categories: 5, replicates: 5000, seed: 2 };
        let mc = multinomial_fisher_mc(&c, &cfg, &prior).unwrap();
        let exact = conditional_multinomial_fisher(&c, &v, 40).unwrap();
        let rel = (&mc - &exact).norm() / exact.norm();
        assert!(rel < 0.1, "relative error {rel}");
    }

    #[test]
    fn crlb_examples() {
        let r = crlb_from_parts(DMatrix::identity(3, 3), DMatrix::zeros(3, 3), 0).unwrap();
        assert!((r.crlb - 3.0).abs() < 1e-15);
        assert_eq!(r.crlb_multinomial, f64::INFINITY);
        let r = crlb_from_parts(dmatrix![2.0], dmatrix![2.0], 0).unwrap();
        assert!((r.crlb - 0.25).abs() < 1e-15);
        assert!(crlb_from_parts(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2), 0).is_err());
    }

    #[test]
    fn too_few_replicates_rejected() {
        let cfg = MultinomialFisherConfig { trials: 4, categories: 3, replicates: 1, seed: 0 };
        assert!(multinomial_fisher_mc(&dvector![1.0], &cfg, &LoadingPrior::StandardNormal).is_err());
        let cfg = MultinomialFisherConfig { replicates: 2, ..cfg };
        assert!(multinomial_fisher_mc(&dvector![1.0], &cfg, &LoadingPrior::StandardNormal).is_ok());
    }

    #[test]
    fn procrustes_undoes_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let truth = randn(&mut rng, 3, 40);
        let q = randn(&mut rng, 3, 3).qr().q();
        let est = q.transpose() * &truth;
        assert!(aligned_mse(&est, &truth) < 1e-20);
    }

    #[test]
    fn scalar_gaussian_mse_near_bound() {
        // K = 1, Gaussian only, many instances: the score MSE is close to trace(F_g⁻¹).
        let cfg = MseExperimentConfig {
            instances: 2000,
            gaussian_features: 20,
            categories: 0,
            factors: 1,
            iterations: 60,
            runs: 1,
            alpha: 1.0,
            beta: 0.5,
            seed: 5,
            ..MseExperimentConfig::default()
        };
        let res = mse_experiment(&cfg).unwrap();
        let last = res.rows.last().unwrap();
        let ratio = last.mse_mean / last.crlb_total;
        assert!((ratio - 1.0).abs() < 0.2, "mse {} bound {}", last.mse_mean, last.crlb_total);
    }
}
