//! Choosing the number of factors by BIC on a held-out fold.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::HeteroDataset;
use crate::error::{MmfaError, Result};
use crate::fit::{fit, ModelSpec};
use crate::inference::predictive_log_likelihood;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionOptions {
    /// Share of instances held out for the likelihood term.
    pub holdout_fraction: f64,
    /// Seed of the train/held-out split.
    pub split_seed: u64,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        SelectionOptions { holdout_fraction: 0.2, split_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BicRow {
    pub k: usize,
    pub bic: f64,
    pub heldout_log_likelihood: f64,
    /// `P_h·K + P_h·D₁` on the held-out fold.
    pub parameters: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub best_k: usize,
    pub table: Vec<BicRow>,
    pub heldout: Vec<usize>,
}

/// Splits `0..p` into (train, held-out) with a seeded shuffle.
pub fn holdout_split(p: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if p < 2 {
        return Err(MmfaError::InvalidArgument("need at least two instances to hold one out".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(MmfaError::InvalidArgument(format!("holdout fraction must lie in (0, 1), got {fraction}")));
    }
    let mut idx: Vec<usize> = (0..p).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let h = ((fraction * p as f64).round() as usize).clamp(1, p - 1);
    let mut heldout = idx.split_off(p - h);
    idx.sort_unstable();
    heldout.sort_unstable();
    Ok((idx, heldout))
}

pub fn select_k<T: Real>(data: &HeteroDataset<T>, candidates: &[usize], template: &ModelSpec<T>) -> Result<Selection> {
    select_k_with(data, candidates, template, SelectionOptions::default())
}

/// Fits every candidate on the training fold and scores
/// `BIC = k·log(P_h) − 2·log p(X_h)` on the held-out fold; ties go to the
/// smaller `K`.
pub fn select_k_with<T: Real>(
    data: &HeteroDataset<T>,
    candidates: &[usize],
    template: &ModelSpec<T>,
    options: SelectionOptions,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(MmfaError::InvalidArgument("no candidate K given".into()));
    }
    let (train_idx, heldout) = holdout_split(data.instances(), options.holdout_fraction, options.split_seed)?;
    let train = data.subset(&train_idx);
    let test = data.subset(&heldout);
    let p_h = heldout.len() as f64;

    let mut table = Vec::with_capacity(candidates.len());
    for &k in candidates {
        let wrap = |e| MmfaError::Candidate { k, source: Box::new(e) };
        let mut spec = template.clone();
        spec.factors = k;
        let model = fit(&train, &spec).map_err(wrap)?;
        let ll = predictive_log_likelihood(&model, &test).map_err(wrap)?.total.as_f64();
        let parameters = p_h * k as f64 + p_h * data.gaussian_features() as f64;
        table.push(BicRow {
            k,
            bic: parameters * p_h.ln() - 2.0 * ll,
            heldout_log_likelihood: ll,
            parameters,
            iterations: model.iterations_run,
            converged: model.converged,
        });
    }
    let best = table
        .iter()
        .min_by(|a, b| a.bic.partial_cmp(&b.bic).unwrap_or(std::cmp::Ordering::Equal).then(a.k.cmp(&b.k)))
        .expect("nonempty table");
    Ok(Selection { best_k: best.k, table, heldout })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::InverseGammaPrior;
    use crate::synth::{sample_dataset, CategoricalConfig, GeneratorConfig};

    #[test]
    fn split_is_disjoint_and_seeded() {
        let (a, b) = holdout_split(50, 0.2, 3).unwrap();
        assert_eq!(b.len(), 10);
        assert_eq!(a.len(), 40);
        assert!(a.iter().all(|i| !b.contains(i)));
        assert_eq!(holdout_split(50, 0.2, 3).unwrap(), (a, b));
        assert!(holdout_split(1, 0.5, 0).is_err());
    }

    #[test]
    fn single_candidate_is_returned() {
        let cfg = GeneratorConfig { instances: 60, factors: 2, ..Default::default() };
        let (data, _) = sample_dataset(&cfg).unwrap();
        let mut spec = ModelSpec::new(1, 10, vec![5]);
        spec.max_iters = 20;
        let sel = select_k(&data, &[2], &spec).unwrap();
        assert_eq!(sel.best_k, 2);
        assert_eq!(sel.table.len(), 1);
        assert!(sel.table[0].bic.is_finite());
        assert!(select_k(&data, &[], &spec).is_err());
    }

    #[test]
    fn candidate_errors_carry_k() {
        let cfg = GeneratorConfig { instances: 30, ..Default::default() };
        let (data, _) = sample_dataset(&cfg).unwrap();
        let spec = ModelSpec::new(1, 10, vec![5]);
        match select_k(&data, &[1, 0], &spec) {
            Err(MmfaError::Candidate { k, .. }) => assert_eq!(k, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn recovers_true_k() {
        let cfg = GeneratorConfig {
            factors: 3,
            instances: 500,
            gaussian_features: 10,
            noise_variance: 1.0,
            categorical: vec![CategoricalConfig::constant(5, 20)],
            seed: 21,
            ..Default::default()
        };
        let (data, _) = sample_dataset(&cfg).unwrap();
        let mut spec = ModelSpec::new(1, 10, vec![5]);
        spec.noise_prior = InverseGammaPrior::new(1.0, 0.5).unwrap();
        spec.max_iters = 200;
        spec.tol = 1e-7;
        let sel = select_k(&data, &[1, 2, 3, 4, 5, 6], &spec).unwrap();
        assert_eq!(sel.best_k, 3, "{:#?}", sel.table);
    }
}
