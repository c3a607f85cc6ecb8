//! Versioned model files.
//!
//! A model is one JSON document. Matrices are stored inline as
//! column-major arrays, or, for large models, as offsets into a sidecar
//! `<file>.blob` of raw little-endian `f64` values. Values round-trip
//! bit-exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MmfaError, Result};
use crate::fit::{FitState, FittedModel, ModelSpec};
use crate::gaussian::{GaussianFeatureState, InverseGammaPrior, NoiseVariances};
use crate::multinomial::{MultinomialPosterior, MultinomialState};
use crate::qp::ScoreUpdate;
use crate::scalar::Real;

pub const MODEL_SCHEMA: &str = "mmfa-model/1";

/// Total matrix entries above which [`BlobPolicy::Auto`] writes a sidecar.
pub const BLOB_THRESHOLD: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlobPolicy {
    #[default]
    Auto,
    Always,
    Never,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum Number {
    Finite(f64),
    Special(String),
}

impl Number {
    fn from(x: f64) -> Self {
        if x.is_finite() {
            Number::Finite(x)
        } else {
            Number::Special(x.to_string())
        }
    }

    fn value(&self) -> Result<f64> {
        match self {
            Number::Finite(x) => Ok(*x),
            Number::Special(s) => s.parse().map_err(|_| MmfaError::Schema(format!("bad number {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum Matrix {
    Inline { rows: usize, cols: usize, data: Vec<f64> },
    Blob { rows: usize, cols: usize, offset: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
enum ScoreUpdateDoc {
    Unconstrained,
    Ridge { weight: f64 },
    NonNegative,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpecDoc {
    factors: usize,
    gaussian_features: usize,
    alpha: f64,
    beta: f64,
    categories: Vec<usize>,
    score_update: ScoreUpdateDoc,
    max_iters: usize,
    tol: Number,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GaussianDoc {
    means: Matrix,
    covariances: Vec<Matrix>,
    log_det_covariances: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MultinomialDoc {
    categories: usize,
    f: Matrix,
    f_inv: Matrix,
    delta: Matrix,
    phi: Matrix,
    log_det_cov: f64,
    psi: Matrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDoc {
    schema: String,
    scalar: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    blob: Option<String>,
    spec: SpecDoc,
    scores: Matrix,
    gaussian: Option<GaussianDoc>,
    noise: Option<Matrix>,
    multinomial: Vec<MultinomialDoc>,
    objective_trace: Vec<f64>,
    iterations_run: usize,
    converged: bool,
}

struct Writer {
    blob: Option<Vec<u8>>,
}

impl Writer {
    fn put<T: Real>(&mut self, m: &DMatrix<T>) -> Matrix {
        let (rows, cols) = m.shape();
        match &mut self.blob {
            Some(buf) => {
                let offset = buf.len() / 8;
                for &x in m.iter() {
                    buf.extend_from_slice(&x.as_f64().to_le_bytes());
                }
                Matrix::Blob { rows, cols, offset }
            }
            None => Matrix::Inline { rows, cols, data: m.iter().map(|x| x.as_f64()).collect() },
        }
    }
}

struct Reader {
    blob: Option<Vec<u8>>,
}

impl Reader {
    fn get<T: Real>(&self, m: &Matrix) -> Result<DMatrix<T>> {
        match m {
            Matrix::Inline { rows, cols, data } => {
                if data.len() != rows * cols {
                    return Err(MmfaError::Schema(format!("matrix {rows}x{cols} has {} entries", data.len())));
                }
                Ok(DMatrix::from_iterator(*rows, *cols, data.iter().map(|&x| T::of(x))))
            }
            Matrix::Blob { rows, cols, offset } => {
                let buf = self.blob.as_ref().ok_or_else(|| MmfaError::Schema("blob reference without blob file".into()))?;
                let start = offset * 8;
                let end = start + rows * cols * 8;
                if end > buf.len() {
                    return Err(MmfaError::Schema("blob file is truncated".into()));
                }
                let vals = buf[start..end]
                    .chunks_exact(8)
                    .map(|b| T::of(f64::from_le_bytes(b.try_into().expect("8-byte chunk"))));
                Ok(DMatrix::from_iterator(*rows, *cols, vals))
            }
        }
    }
}

fn blob_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".blob");
    path.with_file_name(name)
}

fn entry_count<T: Real>(model: &FittedModel<T>) -> usize {
    let st = &model.state;
    let mut n = st.scores.len();
    if let Some(g) = &st.gaussian {
        n += g.means.len() + g.covariances.iter().map(|c| c.len()).sum::<usize>();
    }
    n += st.noise.as_ref().map_or(0, |v| v.values.len());
    for m in &st.multinomial {
        n += m.posterior.f.len() * 3 + m.posterior.phi.len() + m.psi.len();
    }
    n
}

pub fn save_model<T: Real>(model: &FittedModel<T>, path: &Path) -> Result<()> {
    save_model_with(model, path, BlobPolicy::Auto)
}

pub fn save_model_with<T: Real>(model: &FittedModel<T>, path: &Path, policy: BlobPolicy) -> Result<()> {
    let use_blob = match policy {
        BlobPolicy::Auto => entry_count(model) > BLOB_THRESHOLD,
        BlobPolicy::Always => true,
        BlobPolicy::Never => false,
    };
    let mut w = Writer { blob: use_blob.then(Vec::new) };
    let spec = &model.spec;
    let st = &model.state;
    let doc = ModelDoc {
        schema: MODEL_SCHEMA.to_string(),
        scalar: T::NAME.to_string(),
        blob: None,
        spec: SpecDoc {
            factors: spec.factors,
            gaussian_features: spec.gaussian_features,
            alpha: spec.noise_prior.alpha.as_f64(),
            beta: spec.noise_prior.beta.as_f64(),
            categories: spec.categories.clone(),
            score_update: match spec.score_update {
                ScoreUpdate::Unconstrained => ScoreUpdateDoc::Unconstrained,
                ScoreUpdate::Ridge(w) => ScoreUpdateDoc::Ridge { weight: w.as_f64() },
                ScoreUpdate::NonNegative => ScoreUpdateDoc::NonNegative,
            },
            max_iters: spec.max_iters,
            tol: Number::from(spec.tol.as_f64()),
            seed: spec.seed,
        },
        scores: w.put(&st.scores),
        gaussian: st.gaussian.as_ref().map(|g| GaussianDoc {
            means: w.put(&g.means),
            covariances: g.covariances.iter().map(|c| w.put(c)).collect(),
            log_det_covariances: g.log_det_covariances.iter().map(|x| x.as_f64()).collect(),
        }),
        noise: st.noise.as_ref().map(|n| w.put(&n.values)),
        multinomial: st
            .multinomial
            .iter()
            .map(|m| MultinomialDoc {
                categories: m.posterior.categories,
                f: w.put(&m.posterior.f),
                f_inv: w.put(&m.posterior.f_inv),
                delta: w.put(&m.posterior.delta),
                phi: w.put(&m.posterior.phi),
                log_det_cov: m.posterior.log_det_cov.as_f64(),
                psi: w.put(&m.psi),
            })
            .collect(),
        objective_trace: model.objective_trace.iter().map(|x| x.as_f64()).collect(),
        iterations_run: model.iterations_run,
        converged: model.converged,
    };
    let doc = match w.blob {
        Some(buf) => {
            let bp = blob_path(path);
            fs::write(&bp, buf)?;
            ModelDoc { blob: bp.file_name().map(|n| n.to_string_lossy().into_owned()), ..doc }
        }
        None => doc,
    };
    let mut file = fs::File::create(path)?;
    serde_json::to_writer(&mut file, &doc)?;
    file.write_all(b"\n")?;
    Ok(())
}

pub fn load_model<T: Real>(path: &Path) -> Result<FittedModel<T>> {
    let text = fs::read_to_string(path)?;
    let doc: ModelDoc = serde_json::from_str(&text)?;
    if doc.schema != MODEL_SCHEMA {
        return Err(MmfaError::Schema(format!("unsupported model schema {:?}, expected {MODEL_SCHEMA:?}", doc.schema)));
    }
    if doc.scalar != T::NAME {
        return Err(MmfaError::Schema(format!("model stores {} values, requested {}", doc.scalar, T::NAME)));
    }
    let blob = match &doc.blob {
        Some(name) => Some(fs::read(path.with_file_name(name))?),
        None => None,
    };
    let r = Reader { blob };
    let s = &doc.spec;
    let spec = ModelSpec {
        factors: s.factors,
        gaussian_features: s.gaussian_features,
        noise_prior: InverseGammaPrior { alpha: T::of(s.alpha), beta: T::of(s.beta) },
        categories: s.categories.clone(),
        score_update: match s.score_update {
            ScoreUpdateDoc::Unconstrained => ScoreUpdate::Unconstrained,
            ScoreUpdateDoc::Ridge { weight } => ScoreUpdate::Ridge(T::of(weight)),
            ScoreUpdateDoc::NonNegative => ScoreUpdate::NonNegative,
        },
        max_iters: s.max_iters,
        tol: T::of(s.tol.value()?),
        seed: s.seed,
    };
    let gaussian = match &doc.gaussian {
        Some(g) => Some(GaussianFeatureState {
            means: r.get(&g.means)?,
            covariances: g.covariances.iter().map(|c| r.get(c)).collect::<Result<_>>()?,
            log_det_covariances: g.log_det_covariances.iter().map(|&x| T::of(x)).collect(),
        }),
        None => None,
    };
    let noise = match &doc.noise {
        Some(n) => Some(NoiseVariances { values: r.get(n)? }),
        None => None,
    };
    let multinomial = doc
        .multinomial
        .iter()
        .map(|m| {
            Ok(MultinomialState {
                posterior: MultinomialPosterior {
                    categories: m.categories,
                    f: r.get(&m.f)?,
                    f_inv: r.get(&m.f_inv)?,
                    delta: r.get(&m.delta)?,
                    phi: r.get(&m.phi)?,
                    log_det_cov: T::of(m.log_det_cov),
                },
                psi: r.get(&m.psi)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: DMatrix<T> = r.get(&doc.scores)?;
    if scores.nrows() != spec.factors || multinomial.len() != spec.categories.len() {
        return Err(MmfaError::Schema("model state does not match its spec".into()));
    }
    Ok(FittedModel {
        spec,
        state: FitState { scores, gaussian, noise, multinomial },
        objective_trace: doc.objective_trace.iter().map(|&x| T::of(x)).collect(),
        iterations_run: doc.iterations_run,
        converged: doc.converged,
    })
}

/// The objective trace as `iteration,objective` CSV rows.
pub fn trace_csv<T: Real>(model: &FittedModel<T>) -> String {
    let mut out = String::from("iteration,objective\n");
    for (i, v) in model.objective_trace.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, crate::dataset_io::fmt_f64(v.as_f64())));
    }
    out
}
