//! Layer-wise representational comparison of two models' hidden states:
//! cosine and L2 drift per token, and participation-ratio effective
//! dimensionality per model.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{mean_se, MetricSummary, StatsError};
use crate::trace::{Model, TeacherForcedTrace};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("trace is missing hidden states for model {0:?}")]
    MissingHiddenStates(Model),
    #[error("layer {layer} out of range (trace stores {available})")]
    LayerOutOfRange { layer: usize, available: usize },
    #[error("sample needs at least 2 vectors, got {0}")]
    DegenerateSample(usize),
    #[error("sample shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation")]
    NonFinite,
    #[error("position subsample of {requested} from {available} positions")]
    BadSubsample { requested: usize, available: usize },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Eigenvalues below this fraction of the largest one are treated as zero.
pub const EIGEN_CLAMP_RATIO: f64 = 1e-10;

/// `N x D` activations of one model at one layer, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSample {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl ActivationSample {
    pub fn new(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if rows < 2 {
            return Err(GeometryError::DegenerateSample(rows));
        }
        if dim == 0 || values.len() != rows * dim {
            return Err(GeometryError::ShapeMismatch(format!(
                "{} values for {rows} x {dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(ActivationSample { rows, dim, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Gathers layer `l` of `model` at the given positions.
    pub fn from_trace(
        trace: &TeacherForcedTrace,
        model: Model,
        l: usize,
        positions: &[usize],
    ) -> Result<Self> {
        check_layer(trace, model, l)?;
        let d = trace.hidden_dim();
        let mut values = Vec::with_capacity(positions.len() * d);
        for &t in positions {
            let h = trace
                .hidden(model, t, l)
                .ok_or(GeometryError::MissingHiddenStates(model))?;
            values.extend(h.iter().map(|&x| f64::from(x)));
        }
        Self::new(positions.len(), d, values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpectrum {
    /// Nonincreasing, nonnegative.
    pub eigenvalues: Vec<f64>,
}

impl CovarianceSpectrum {
    pub fn participation_ratio(&self) -> f64 {
        participation_ratio_of(&self.eigenvalues)
    }
}

/// `(Σλ)² / Σλ²`; an all-zero spectrum has ratio 1.
pub fn participation_ratio_of(eigenvalues: &[f64]) -> f64 {
    let max = eigenvalues.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 1.0;
    }
    // Scaled by the largest eigenvalue, so d equal values give exactly d.
    let sum: f64 = eigenvalues.iter().map(|x| x / max).sum();
    let sq: f64 = eigenvalues.iter().map(|x| (x / max) * (x / max)).sum();
    sum * sum / sq
}

/// Eigenvalues of the mean-centred sample covariance (`N - 1` denominator).
/// Uses the `N x N` Gram matrix instead when `N < D`; both share their
/// nonzero spectrum.
pub fn covariance_spectrum(sample: &ActivationSample) -> CovarianceSpectrum {
    let (n, d) = (sample.rows, sample.dim);
    let mut x = DMatrix::from_row_slice(n, d, &sample.values);
    for mut col in x.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    let denom = (n - 1) as f64;
    let gram = if d <= n {
        x.transpose() * &x
    } else {
        &x * x.transpose()
    } / denom;
    let mut eig: Vec<f64> = SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let top = eig.first().copied().unwrap_or(0.0).max(0.0);
    for v in &mut eig {
        if *v < EIGEN_CLAMP_RATIO * top || *v < 0.0 {
            *v = 0.0;
        }
    }
    CovarianceSpectrum { eigenvalues: eig }
}

pub fn participation_ratio(sample: &ActivationSample) -> f64 {
    covariance_spectrum(sample).participation_ratio()
}

fn check_layer(trace: &TeacherForcedTrace, model: Model, l: usize) -> Result<()> {
    if !trace.has_hidden(model) {
        return Err(GeometryError::MissingHiddenStates(model));
    }
    if l >= trace.layer_count() {
        return Err(GeometryError::LayerOutOfRange {
            layer: l,
            available: trace.layer_count(),
        });
    }
    Ok(())
}

fn paired_layer(trace: &TeacherForcedTrace, l: usize) -> Result<()> {
    check_layer(trace, Model::A, l)?;
    check_layer(trace, Model::B, l)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn per_token(
    trace: &TeacherForcedTrace,
    l: usize,
    positions: &[usize],
    f: impl Fn(&[f32], &[f32]) -> f64,
) -> Result<MetricSummary> {
    paired_layer(trace, l)?;
    let values: Vec<f64> = positions
        .iter()
        .map(|&t| {
            // Presence checked above.
            let a = trace.hidden(Model::A, t, l).unwrap_or_default();
            let b = trace.hidden(Model::B, t, l).unwrap_or_default();
            f(a, b)
        })
        .collect();
    Ok(mean_se(&values)?)
}

fn all_positions(trace: &TeacherForcedTrace) -> Vec<usize> {
    (0..trace.positions()).collect()
}

/// Mean per-token cosine similarity between A and B at layer `l`.
pub fn layer_cosine(trace: &TeacherForcedTrace, l: usize) -> Result<MetricSummary> {
    per_token(trace, l, &all_positions(trace), cosine)
}

/// Mean per-token Euclidean distance between A and B at layer `l`.
pub fn layer_l2(trace: &TeacherForcedTrace, l: usize) -> Result<MetricSummary> {
    per_token(trace, l, &all_positions(trace), l2)
}

/// Which positions feed the pooled activation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum PositionPolicy {
    All,
    /// Uniform sample without replacement, returned in ascending order.
    Subsample {
        count: usize,
        seed: u64,
    },
}

impl PositionPolicy {
    pub fn select(&self, available: usize) -> Result<Vec<usize>> {
        match *self {
            PositionPolicy::All => Ok((0..available).collect()),
            PositionPolicy::Subsample { count, seed } => {
                if count > available || count == 0 {
                    return Err(GeometryError::BadSubsample {
                        requested: count,
                        available,
                    });
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut idx = sample(&mut rng, available, count).into_vec();
                idx.sort_unstable();
                Ok(idx)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub layer: usize,
    pub cosine: MetricSummary,
    pub l2: MetricSummary,
    pub pr_a: f64,
    pub pr_b: f64,
    pub delta_dim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub layers: Vec<LayerGeometry>,
    /// Prefix sums of `delta_dim`.
    pub cumulative_delta_dim: Vec<f64>,
    pub positions_used: usize,
}

pub fn delta_dim_profile(
    trace: &TeacherForcedTrace,
    policy: &PositionPolicy,
) -> Result<GeometryReport> {
    for m in [Model::A, Model::B] {
        if !trace.has_hidden(m) {
            return Err(GeometryError::MissingHiddenStates(m));
        }
    }
    let positions = policy.select(trace.positions())?;
    let mut layers = Vec::with_capacity(trace.layer_count());
    for l in 0..trace.layer_count() {
        let pr_a = participation_ratio(&ActivationSample::from_trace(
            trace,
            Model::A,
            l,
            &positions,
        )?);
        let pr_b = participation_ratio(&ActivationSample::from_trace(
            trace,
            Model::B,
            l,
            &positions,
        )?);
        layers.push(LayerGeometry {
            layer: l,
            cosine: per_token(trace, l, &positions, cosine)?,
            l2: per_token(trace, l, &positions, l2)?,
            pr_a,
            pr_b,
            delta_dim: pr_b - pr_a,
        });
    }
    let cumulative_delta_dim = layers
        .iter()
        .scan(0.0, |acc, g| {
            *acc += g.delta_dim;
            Some(*acc)
        })
        .collect();
    Ok(GeometryReport {
        layers,
        cumulative_delta_dim,
        positions_used: positions.len(),
    })
}
