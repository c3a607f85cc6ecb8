//! Seeded sampling from the generative model: loadings `u_j, v_d ~ N(0, I)`,
//! scores `c_i`, `y_ij ~ N(u_jᵀc_i, σ²)` and
//! `z_i ~ Multinomial(N_i, softmax_pivot(Vᵀc_i))`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{CategoricalBlock, GaussianBlock, HeteroDataset, ObservationMask};
use crate::error::{MmfaError, Result};
use crate::expfam::softmax_pivot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trials {
    Constant(u32),
    /// Uniform on `min..=max`, drawn per instance.
    Uniform { min: u32, max: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalConfig {
    pub categories: usize,
    pub trials: Trials,
}

impl CategoricalConfig {
    pub fn constant(categories: usize, trials: u32) -> Self {
        CategoricalConfig { categories, trials: Trials::Constant(trials) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreDistribution {
    #[default]
    StandardNormal,
    /// Isotropic normal with the given standard deviation.
    Normal { sd: f64 },
    /// Every instance shares the same score vector.
    Shared { score: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutlierMechanism {
    /// The real-valued block is regenerated from an independent score `c'`
    /// while the categorical blocks keep the original `c`.
    #[default]
    CrossModal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub factors: usize,
    pub instances: usize,
    pub gaussian_features: usize,
    pub noise_variance: f64,
    pub categorical: Vec<CategoricalConfig>,
    pub scores: ScoreDistribution,
    pub outlier_fraction: f64,
    pub outlier_mechanism: OutlierMechanism,
    /// Probability that each real-valued entry is hidden.
    pub missing_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            factors: 3,
            instances: 500,
            gaussian_features: 10,
            noise_variance: 1.0,
            categorical: vec![CategoricalConfig::constant(5, 20)],
            scores: ScoreDistribution::StandardNormal,
            outlier_fraction: 0.0,
            outlier_mechanism: OutlierMechanism::CrossModal,
            missing_fraction: 0.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MmfaError::InvalidArgument(m.to_string()));
        if self.factors == 0 {
            return bad("factors must be positive");
        }
        if self.gaussian_features == 0 && self.categorical.is_empty() {
            return bad("at least one modality is required");
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return bad("noise variance must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) || !(0.0..1.0).contains(&self.missing_fraction) {
            return bad("fractions must lie in [0, 1)");
        }
        for c in &self.categorical {
            if c.categories < 2 {
                return bad("categorical modalities need at least 2 categories");
            }
            if let Trials::Uniform { min, max } = c.trials {
                if min > max {
                    return bad("uniform trials need min <= max");
                }
            }
        }
        match &self.scores {
            ScoreDistribution::Normal { sd } if !(*sd >= 0.0) => bad("score sd must be nonnegative"),
            ScoreDistribution::Shared { score } if score.len() != self.factors => {
                bad("shared score must have length K")
            }
            _ => Ok(()),
        }
    }
}

/// The latent quantities behind a sampled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// `K × P`.
    pub scores: DMatrix<f64>,
    /// `K × D₁`; column `j` is `u_j`.
    pub gaussian_loadings: DMatrix<f64>,
    /// `K × (D₂ − 1)` per modality; column `d` is `v_d`.
    pub categorical_loadings: Vec<DMatrix<f64>>,
    pub noise_variance: f64,
    /// Instances whose real-valued block was regenerated as outliers.
    pub outliers: Vec<usize>,
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for v in m.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    m
}

/// Multinomial draw through sequential conditional binomials.
pub fn sample_multinomial<R: Rng + ?Sized>(rng: &mut R, trials: u32, probs: &[f64]) -> Vec<u32> {
    let mut out = vec![0u32; probs.len()];
    let mut remaining = trials as u64;
    let mut mass = 1.0f64;
    for (d, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if d + 1 == probs.len() {
            out[d] = remaining as u32;
            break;
        }
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
        let draw = Binomial::new(remaining, q).expect("valid binomial").sample(rng);
        out[d] = draw as u32;
        remaining -= draw;
        mass -= p;
    }
    out
}

fn sample_gaussian_block(rng: &mut ChaCha8Rng, scores: &DMatrix<f64>, loadings: &DMatrix<f64>, noise_sd: f64) -> DMatrix<f64> {
    let p = scores.ncols();
    let d = loadings.ncols();
    let mean = scores.tr_mul(loadings);
    let mut y = DMatrix::zeros(p, d);
    for i in 0..p {
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            y[(i, j)] = mean[(i, j)] + noise_sd * e;
        }
    }
    y
}

pub fn sample_dataset(cfg: &GeneratorConfig) -> Result<(HeteroDataset<f64>, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.factors;
    let p = cfg.instances;

    let gaussian_loadings = randn(&mut rng, k, cfg.gaussian_features);
    let categorical_loadings: Vec<DMatrix<f64>> =
        cfg.categorical.iter().map(|c| randn(&mut rng, k, c.categories - 1)).collect();
    let scores = match &cfg.scores {
        ScoreDistribution::StandardNormal => randn(&mut rng, k, p),
        ScoreDistribution::Normal { sd } => randn(&mut rng, k, p) * *sd,
        ScoreDistribution::Shared { score } => {
            DMatrix::from_fn(k, p, |r, _| score[r])
        }
    };

    let noise_sd = cfg.noise_variance.sqrt();
    let y = sample_gaussian_block(&mut rng, &scores, &gaussian_loadings, noise_sd);

    let mut categorical = Vec::with_capacity(cfg.categorical.len());
    for (conf, v) in cfg.categorical.iter().zip(&categorical_loadings) {
        let mut full = DMatrix::<u32>::zeros(p, conf.categories);
        for i in 0..p {
            let n = match conf.trials {
                Trials::Constant(n) => n,
                Trials::Uniform { min, max } => rng.random_range(min..=max),
            };
            let eta: Vec<f64> = v.tr_mul(&scores.column(i)).iter().copied().collect();
            let probs = softmax_pivot(&eta)?;
            let z = sample_multinomial(&mut rng, n, &probs);
            for (d, &zd) in z.iter().enumerate() {
                full[(i, d)] = zd;
            }
        }
        categorical.push(CategoricalBlock::from_counts(&full)?);
    }

    let gaussian = if cfg.gaussian_features > 0 { Some(GaussianBlock::new(y, None)?) } else { None };
    let mut data = HeteroDataset::new(gaussian, categorical)?;
    let mut truth = GroundTruth {
        scores,
        gaussian_loadings,
        categorical_loadings,
        noise_variance: cfg.noise_variance,
        outliers: Vec::new(),
    };

    if cfg.outlier_fraction > 0.0 {
        let seed = rng.random::<u64>();
        let (d, labels) = inject_outliers(&data, &truth, cfg.outlier_fraction, cfg.outlier_mechanism, seed)?;
        data = d;
        truth.outliers = labels;
    }

    if cfg.missing_fraction > 0.0 && cfg.gaussian_features > 0 {
        let mut mask = ObservationMask::all_observed(p, cfg.gaussian_features);
        for j in 0..cfg.gaussian_features {
            for i in 0..p {
                if rng.random::<f64>() < cfg.missing_fraction {
                    mask.set(i, j, false);
                }
            }
        }
        let values = data.gaussian().expect("gaussian block").values().clone();
        data = data.with_gaussian(GaussianBlock::new(values, Some(mask))?)?;
    }
    Ok((data, truth))
}

/// Regenerates the real-valued block of `round(fraction · P)` randomly chosen
/// instances from an independent score; returns the sorted outlier indices.
pub fn inject_outliers(
    data: &HeteroDataset<f64>,
    truth: &GroundTruth,
    fraction: f64,
    mechanism: OutlierMechanism,
    seed: u64,
) -> Result<(HeteroDataset<f64>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(MmfaError::InvalidArgument("outlier fraction must lie in [0, 1)".into()));
    }
    let p = data.instances();
    let count = (fraction * p as f64).round() as usize;
    if count == 0 {
        return Ok((data.clone(), Vec::new()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = rand::seq::index::sample(&mut rng, p, count).into_vec();
    labels.sort_unstable();

    let Some(block) = data.gaussian() else {
        return Err(MmfaError::InvalidArgument("cross-modal outliers need a real-valued block".into()));
    };
    match mechanism {
        OutlierMechanism::CrossModal => {
            let k = truth.scores.nrows();
            let mut values = block.values().clone();
            let sd = truth.noise_variance.sqrt();
            for &i in &labels {
                let c_alt = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
                for j in 0..block.features() {
                    let e: f64 = rng.sample(StandardNormal);
                    values[(i, j)] = truth.gaussian_loadings.column(j).dot(&c_alt) + sd * e;
                }
            }
            let replaced = GaussianBlock::new(values, block.mask().cloned())?;
            Ok((data.clone().with_gaussian(replaced)?, labels))
        }
    }
}
