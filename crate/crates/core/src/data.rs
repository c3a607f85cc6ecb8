//! Heterogeneous datasets: one real-valued block plus any number of
//! categorical (multinomial) blocks over the same `P` instances.

use nalgebra::{DMatrix, DVector};

use crate::error::{MmfaError, Result};
use crate::scalar::Real;

/// `P × D₁` observation mask, `true` = observed.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMask {
    observed: DMatrix<bool>,
}

impl ObservationMask {
    pub fn new(observed: DMatrix<bool>) -> Self {
        ObservationMask { observed }
    }

    pub fn all_observed(instances: usize, features: usize) -> Self {
        ObservationMask {
            observed: DMatrix::from_element(instances, features, true),
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.observed[(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.observed[(i, j)] = value;
    }

    pub fn shape(&self) -> (usize, usize) {
        self.observed.shape()
    }

    pub fn matrix(&self) -> &DMatrix<bool> {
        &self.observed
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&b| b).count()
    }
}

/// Real-valued block `Y` (`P × D₁`) with an optional mask. Values at masked
/// entries are never read.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBlock<T: Real> {
    values: DMatrix<T>,
    mask: Option<ObservationMask>,
}

impl<T: Real> GaussianBlock<T> {
    pub fn new(values: DMatrix<T>, mask: Option<ObservationMask>) -> Result<Self> {
        if let Some(m) = &mask {
            if m.shape() != values.shape() {
                return Err(MmfaError::DimensionMismatch(format!(
                    "mask is {:?} but values are {:?}",
                    m.shape(),
                    values.shape()
                )));
            }
        }
        for j in 0..values.ncols() {
            for i in 0..values.nrows() {
                let observed = mask.as_ref().map_or(true, |m| m.get(i, j));
                if observed && !values[(i, j)].is_finite() {
                    return Err(MmfaError::InvalidArgument(format!(
                        "observed real value at ({i}, {j}) is not finite"
                    )));
                }
            }
        }
        Ok(GaussianBlock { values, mask })
    }

    pub fn instances(&self) -> usize {
        self.values.nrows()
    }

    pub fn features(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<T> {
        &self.values
    }

    pub fn mask(&self) -> Option<&ObservationMask> {
        self.mask.as_ref()
    }

    #[inline]
    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m.get(i, j))
    }

    pub fn observed_in_row(&self, i: usize) -> usize {
        (0..self.features()).filter(|&j| self.is_observed(i, j)).count()
    }
}

/// One multinomial modality. Counts are stored instance-major as a
/// `(D₂ − 1) × P` matrix (pivot column dropped, one column per instance);
/// `trials[i]` is the full row sum `Nᵢ` including the pivot.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalBlock<T: Real> {
    categories: usize,
    counts: DMatrix<T>,
    trials: DVector<T>,
}

impl<T: Real> CategoricalBlock<T> {
    /// Builds from a full `P × D₂` count matrix; `Nᵢ` is the row sum.
    pub fn from_counts(full: &DMatrix<u32>) -> Result<Self> {
        let categories = full.ncols();
        if categories < 2 {
            return Err(MmfaError::InvalidArgument(format!(
                "a categorical modality needs at least 2 categories, got {categories}"
            )));
        }
        let p = full.nrows();
        let m = categories - 1;
        let counts = DMatrix::from_fn(m, p, |d, i| T::of(full[(i, d)] as f64));
        let trials = DVector::from_fn(p, |i, _| {
            T::of(full.row(i).iter().map(|&c| c as f64).sum::<f64>())
        });
        Ok(CategoricalBlock { categories, counts, trials })
    }

    /// One draw per instance (`Nᵢ = 1`); `labels[i] < categories`.
    pub fn from_labels(labels: &[usize], categories: usize) -> Result<Self> {
        let mut full = DMatrix::<u32>::zeros(labels.len(), categories);
        for (i, &l) in labels.iter().enumerate() {
            if l >= categories {
                return Err(MmfaError::InvalidArgument(format!(
                    "label {l} at instance {i} exceeds category count {categories}"
                )));
            }
            full[(i, l)] = 1;
        }
        Self::from_counts(&full)
    }

    /// Builds from non-pivot counts (`(D₂ − 1) × P`) and trial counts.
    pub fn from_parts(categories: usize, counts: DMatrix<T>, trials: DVector<T>) -> Result<Self> {
        if categories < 2 || counts.nrows() != categories - 1 || counts.ncols() != trials.len() {
            return Err(MmfaError::DimensionMismatch(format!(
                "non-pivot counts {}x{} inconsistent with {} categories and {} trial counts",
                counts.nrows(),
                counts.ncols(),
                categories,
                trials.len()
            )));
        }
        for i in 0..trials.len() {
            let col = counts.column(i);
            let total = col.iter().fold(T::zero(), |a, &x| a + x);
            if col.iter().any(|&x| x < T::zero() || x != x.round())
                || trials[i] < T::zero()
                || total > trials[i]
            {
                return Err(MmfaError::InvalidArgument(format!(
                    "instance {i}: counts must be nonnegative integers summing to at most N_i"
                )));
            }
        }
        Ok(CategoricalBlock { categories, counts, trials })
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn instances(&self) -> usize {
        self.counts.ncols()
    }

    /// `(D₂ − 1) × P`, one column per instance.
    pub fn counts(&self) -> &DMatrix<T> {
        &self.counts
    }

    pub fn trials(&self) -> &DVector<T> {
        &self.trials
    }

    /// Full count for category `d` (pivot included) of instance `i`.
    pub fn count(&self, i: usize, d: usize) -> T {
        if d + 1 < self.categories {
            self.counts[(d, i)]
        } else {
            let s = self.counts.column(i).iter().fold(T::zero(), |a, &x| a + x);
            self.trials[i] - s
        }
    }

    pub fn full_counts(&self) -> DMatrix<u32> {
        DMatrix::from_fn(self.instances(), self.categories, |i, d| {
            self.count(i, d).as_f64().round() as u32
        })
    }
}

/// Observations of a single instance, used for scoring unseen data.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance<T: Real> {
    /// Values and observed flags for the real-valued features.
    pub gaussian: Option<(Vec<T>, Vec<bool>)>,
    /// Non-pivot counts and trial count for each categorical modality.
    pub categorical: Vec<(Vec<T>, T)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeteroDataset<T: Real> {
    instances: usize,
    gaussian: Option<GaussianBlock<T>>,
    categorical: Vec<CategoricalBlock<T>>,
}

impl<T: Real> HeteroDataset<T> {
    pub fn new(gaussian: Option<GaussianBlock<T>>, categorical: Vec<CategoricalBlock<T>>) -> Result<Self> {
        let instances = gaussian
            .as_ref()
            .map(|g| g.instances())
            .or_else(|| categorical.first().map(|c| c.instances()))
            .unwrap_or(0);
        if let Some(g) = &gaussian {
            if g.instances() != instances {
                return Err(MmfaError::DimensionMismatch("gaussian block size".into()));
            }
        }
        for (m, c) in categorical.iter().enumerate() {
            if c.instances() != instances {
                return Err(MmfaError::DimensionMismatch(format!(
                    "categorical modality {m} has {} instances, expected {instances}",
                    c.instances()
                )));
            }
        }
        Ok(HeteroDataset { instances, gaussian, categorical })
    }

    pub fn instances(&self) -> usize {
        self.instances
    }

    pub fn gaussian(&self) -> Option<&GaussianBlock<T>> {
        self.gaussian.as_ref()
    }

    pub fn gaussian_features(&self) -> usize {
        self.gaussian.as_ref().map_or(0, |g| g.features())
    }

    pub fn categorical(&self) -> &[CategoricalBlock<T>] {
        &self.categorical
    }

    pub fn category_counts(&self) -> Vec<usize> {
        self.categorical.iter().map(|c| c.categories()).collect()
    }

    pub fn instance(&self, i: usize) -> Instance<T> {
        let gaussian = self.gaussian.as_ref().map(|g| {
            let values: Vec<T> = g.values.row(i).iter().copied().collect();
            let observed = (0..g.features()).map(|j| g.is_observed(i, j)).collect();
            (values, observed)
        });
        let categorical = self
            .categorical
            .iter()
            .map(|c| (c.counts.column(i).iter().copied().collect(), c.trials[i]))
            .collect();
        Instance { gaussian, categorical }
    }

    /// New dataset restricted to `indices` (in that order).
    pub fn subset(&self, indices: &[usize]) -> Self {
        let gaussian = self.gaussian.as_ref().map(|g| GaussianBlock {
            values: g.values.select_rows(indices.iter()),
            mask: g.mask.as_ref().map(|m| ObservationMask {
                observed: m.observed.select_rows(indices.iter()),
            }),
        });
        let categorical = self
            .categorical
            .iter()
            .map(|c| CategoricalBlock {
                categories: c.categories,
                counts: c.counts.select_columns(indices.iter()),
                trials: DVector::from_iterator(indices.len(), indices.iter().map(|&i| c.trials[i])),
            })
            .collect();
        HeteroDataset { instances: indices.len(), gaussian, categorical }
    }

    /// Converts the stored values to another scalar type.
    pub fn cast<U: Real>(&self) -> HeteroDataset<U> {
        let conv = |x: T| U::of(x.as_f64());
        HeteroDataset {
            instances: self.instances,
            gaussian: self.gaussian.as_ref().map(|g| GaussianBlock {
                values: g.values.map(conv),
                mask: g.mask.clone(),
            }),
            categorical: self
                .categorical
                .iter()
                .map(|c| CategoricalBlock {
                    categories: c.categories,
                    counts: c.counts.map(conv),
                    trials: c.trials.map(conv),
                })
                .collect(),
        }
    }

    /// Replaces the real-valued block (same shape required).
    pub fn with_gaussian(mut self, block: GaussianBlock<T>) -> Result<Self> {
        if block.instances() != self.instances {
            return Err(MmfaError::DimensionMismatch("replacement gaussian block".into()));
        }
        self.gaussian = Some(block);
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn counts_round_trip_through_storage() {
        let full = dmatrix![1u32, 0, 2; 0, 3, 0];
        let block = CategoricalBlock::<f64>::from_counts(&full).unwrap();
        assert_eq!(block.categories(), 3);
        assert_eq!(block.trials().as_slice(), &[3.0, 3.0]);
        assert_eq!(block.counts().shape(), (2, 2));
        assert_eq!(block.full_counts(), full);
    }

    #[test]
    fn labels_give_single_trials() {
        let block = CategoricalBlock::<f64>::from_labels(&[0, 2, 1], 3).unwrap();
        assert_eq!(block.trials().as_slice(), &[1.0, 1.0, 1.0]);
        assert_eq!(block.count(1, 2), 1.0);
        assert!(CategoricalBlock::<f64>::from_labels(&[3], 3).is_err());
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let g = GaussianBlock::new(DMatrix::<f64>::zeros(3, 2), None).unwrap();
        let c = CategoricalBlock::from_labels(&[0, 1], 2).unwrap();
        assert!(matches!(
            HeteroDataset::new(Some(g), vec![c]),
            Err(MmfaError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn masked_non_finite_values_are_allowed() {
        let values = dmatrix![1.0, f64::NAN];
        let mut mask = ObservationMask::all_observed(1, 2);
        assert!(GaussianBlock::new(values.clone(), Some(mask.clone())).is_err());
        mask.set(0, 1, false);
        assert!(GaussianBlock::new(values, Some(mask)).is_ok());
    }

    #[test]
    fn subset_keeps_modalities_aligned() {
        let g = GaussianBlock::new(dmatrix![1.0, 2.0; 3.0, 4.0; 5.0, 6.0], None).unwrap();
        let c = CategoricalBlock::from_labels(&[0, 1, 2], 3).unwrap();
        let ds = HeteroDataset::new(Some(g), vec![c]).unwrap();
        let sub = ds.subset(&[2, 0]);
        assert_eq!(sub.instances(), 2);
        assert_eq!(sub.gaussian().unwrap().values()[(0, 1)], 6.0);
        assert_eq!(sub.categorical()[0].count(0, 2), 1.0);
        assert_eq!(sub.instance(1).categorical[0].0, vec![1.0, 0.0]);
    }
}
