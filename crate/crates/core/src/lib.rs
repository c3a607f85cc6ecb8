//! Multimodal factor analysis: a shared low-dimensional score per instance
//! drives real-valued features through a linear-Gaussian model and
//! categorical count vectors through multinomial logit links. Fitting is
//! variational EM with a quadratic bound on the log-sum-exp.

pub mod data;
pub mod dataset_io;
pub mod error;
pub mod expfam;
pub mod fisher;
pub mod fit;
pub mod gaussian;
pub mod inference;
pub mod linalg;
pub mod model_io;
pub mod multinomial;
pub mod qp;
pub mod scalar;
pub mod select;
pub mod synth;

pub use data::{CategoricalBlock, GaussianBlock, HeteroDataset, Instance, ObservationMask};
pub use error::{MmfaError, Result};
pub use expfam::{bohning_bound, lse, softmax_pivot, Curvature};
pub use fit::{fit, fit_with_observer, FitState, FittedModel, ModelSpec};
pub use gaussian::InverseGammaPrior;
pub use qp::ScoreUpdate;
pub use scalar::Real;

pub type Dataset = HeteroDataset<f64>;
pub type Dataset32 = HeteroDataset<f32>;
pub type Spec = ModelSpec<f64>;
pub type Spec32 = ModelSpec<f32>;
pub type Model = FittedModel<f64>;
pub type Model32 = FittedModel<f32>;
