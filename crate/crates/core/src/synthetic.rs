//! Deterministic synthetic language model used in place of a real model pair.
//!
//! Logits at a position depend only on the model seed and the last
//! `context_window` tokens: each vocabulary entry gets `scale * u` with `u` a
//! hash-derived uniform in `[0, 1)`. A repetition attractor adds a fixed bonus
//! to the token seen two positions back, which makes greedy decoding fall into
//! a period-2 loop once the bonus dominates `scale`.
//!
//! Hidden states, when requested, are Gaussian draws with a configured
//! per-layer variance spectrum, rotated by a fixed per-layer orthogonal
//! matrix. Their covariance is known in closed form, which gives the geometry
//! code an analytic participation-ratio target.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{HiddenStates, TeacherForcedTrace, TraceError};

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid synthetic model parameters: {0}")]
    InvalidParams(String),
    #[error("token sequence is empty")]
    EmptyTokens,
    #[error("token id {token} at position {position} is out of range for vocab {vocab}")]
    TokenOutOfRange {
        token: u32,
        position: usize,
        vocab: usize,
    },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModelParams {
    pub seed: u64,
    pub context_window: usize,
    pub repetition_attractor: f64,
    pub scale: f64,
    /// Per-layer variance spectra (`layers x hidden_dim`). Empty means the
    /// model has no hidden states.
    #[serde(default)]
    pub hidden_spectrum: Vec<Vec<f64>>,
}

impl SyntheticModelParams {
    pub fn new(seed: u64, context_window: usize, repetition_attractor: f64, scale: f64) -> Self {
        SyntheticModelParams {
            seed,
            context_window,
            repetition_attractor,
            scale,
            hidden_spectrum: Vec::new(),
        }
    }

    pub fn with_hidden_spectrum(mut self, spectrum: Vec<Vec<f64>>) -> Self {
        self.hidden_spectrum = spectrum;
        self
    }
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(h: u64, x: u64) -> u64 {
    splitmix64(h ^ splitmix64(x))
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal from two hash-derived uniforms (Box-Muller).
fn gaussian(h: u64) -> f64 {
    let u1 = 1.0 - unit(splitmix64(h ^ 0x5851_f42d_4c95_7f2d));
    let u2 = unit(splitmix64(h ^ 0x1405_7b7e_f767_814f));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Debug, Clone)]
pub struct SyntheticModel {
    params: SyntheticModelParams,
    vocab_size: usize,
    rotations: Vec<DMatrix<f64>>,
}

impl SyntheticModel {
    pub fn new(params: SyntheticModelParams, vocab_size: usize) -> Result<Self, SyntheticError> {
        if vocab_size < 2 || u32::try_from(vocab_size).is_err() {
            return Err(SyntheticError::InvalidParams(format!(
                "vocab size {vocab_size} must be in [2, 2^32)"
            )));
        }
        if params.context_window < 1 {
            return Err(SyntheticError::InvalidParams(
                "context window must be >= 1".into(),
            ));
        }
        if !(params.scale.is_finite() && params.scale > 0.0) {
            return Err(SyntheticError::InvalidParams(format!(
                "scale {} must be finite and positive",
                params.scale
            )));
        }
        if !(params.repetition_attractor.is_finite() && params.repetition_attractor >= 0.0) {
            return Err(SyntheticError::InvalidParams(format!(
                "repetition attractor {} must be finite and >= 0",
                params.repetition_attractor
            )));
        }
        let dim = params.hidden_spectrum.first().map_or(0, Vec::len);
        for (l, layer) in params.hidden_spectrum.iter().enumerate() {
            if layer.len() != dim || dim == 0 {
                return Err(SyntheticError::InvalidParams(format!(
                    "hidden spectrum layer {l} has {} entries, expected {dim} (> 0)",
                    layer.len()
                )));
            }
            if layer.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(SyntheticError::InvalidParams(format!(
                    "hidden spectrum layer {l} has a negative or non-finite variance"
                )));
            }
        }
        let rotations = (0..params.hidden_spectrum.len())
            .map(|l| rotation(dim, mix(params.seed ^ 0x726f_7461_7465, l as u64)))
            .collect();
        Ok(SyntheticModel {
            params,
            vocab_size,
            rotations,
        })
    }

    pub fn params(&self) -> &SyntheticModelParams {
        &self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn layer_count(&self) -> usize {
        self.params.hidden_spectrum.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.params.hidden_spectrum.first().map_or(0, Vec::len)
    }

    fn window_hash(&self, context: &[u32]) -> u64 {
        let k = self.params.context_window;
        let window = &context[context.len().saturating_sub(k)..];
        window
            .iter()
            .fold(mix(self.params.seed, window.len() as u64), |h, &tok| {
                mix(h, u64::from(tok))
            })
    }

    /// Next-token logits after consuming `context` (must be nonempty).
    pub fn logits(&self, context: &[u32]) -> Vec<f32> {
        assert!(
            !context.is_empty(),
            "synthetic model needs a nonempty context"
        );
        let wh = self.window_hash(context);
        let mut z: Vec<f64> = (0..self.vocab_size as u64)
            .map(|i| self.params.scale * unit(mix(wh, i)))
            .collect();
        // The predicted position is t = len; the bonus goes to tokens[t - 2].
        let t = context.len();
        if t >= 2 {
            let back = context[t - 2] as usize;
            if back < self.vocab_size {
                z[back] += self.params.repetition_attractor;
            }
        }
        z.into_iter().map(|x| x as f32).collect()
    }

    /// Hidden stack (`layers x dim`, row-major) after consuming `context`.
    pub fn hidden(&self, context: &[u32]) -> Vec<f32> {
        assert!(
            !context.is_empty(),
            "synthetic model needs a nonempty context"
        );
        let d = self.hidden_dim();
        let wh = mix(self.window_hash(context), context.len() as u64);
        let mut out = Vec::with_capacity(self.layer_count() * d);
        for (l, spectrum) in self.params.hidden_spectrum.iter().enumerate() {
            let lh = mix(wh, 0x006c_6179_6572 ^ l as u64);
            let latent: Vec<f64> = spectrum
                .iter()
                .enumerate()
                .map(|(j, var)| var.sqrt() * gaussian(mix(lh, j as u64)))
                .collect();
            let rot = &self.rotations[l];
            for row in 0..d {
                let v: f64 = (0..d).map(|j| rot[(row, j)] * latent[j]).sum();
                out.push(v as f32);
            }
        }
        out
    }

    /// Participation ratio of the configured covariance at layer `l`.
    pub fn analytic_participation_ratio(&self, l: usize) -> Option<f64> {
        let s = self.params.hidden_spectrum.get(l)?;
        let sum: f64 = s.iter().sum();
        let sq: f64 = s.iter().map(|x| x * x).sum();
        Some(if sq == 0.0 { 1.0 } else { sum * sum / sq })
    }
}

/// Deterministic random orthogonal matrix (Gram-Schmidt via QR of a Gaussian
/// matrix).
fn rotation(d: usize, seed: u64) -> DMatrix<f64> {
    if d == 0 {
        return DMatrix::zeros(0, 0);
    }
    let g = DMatrix::from_fn(d, d, |i, j| gaussian(mix(seed, (i * d + j) as u64)));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Fix column signs so the factorization is unique.
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Teacher-forced trace of two synthetic models over `tokens`.
pub fn gen_synthetic_trace(
    model_a: &SyntheticModel,
    model_b: &SyntheticModel,
    tokens: &[u32],
    with_hidden: bool,
) -> Result<TeacherForcedTrace, SyntheticError> {
    if tokens.is_empty() {
        return Err(SyntheticError::EmptyTokens);
    }
    if model_a.vocab_size != model_b.vocab_size {
        return Err(SyntheticError::InvalidParams(format!(
            "vocab sizes differ: {} vs {}",
            model_a.vocab_size, model_b.vocab_size
        )));
    }
    let v = model_a.vocab_size;
    if let Some((position, &token)) = tokens.iter().enumerate().find(|(_, &x)| x as usize >= v) {
        return Err(SyntheticError::TokenOutOfRange {
            token,
            position,
            vocab: v,
        });
    }
    if with_hidden {
        if model_a.layer_count() == 0 || model_b.layer_count() == 0 {
            return Err(SyntheticError::InvalidParams(
                "hidden states requested but a model has no hidden spectrum".into(),
            ));
        }
        if (model_a.layer_count(), model_a.hidden_dim())
            != (model_b.layer_count(), model_b.hidden_dim())
        {
            return Err(SyntheticError::InvalidParams(
                "hidden spectra of the two models differ in shape".into(),
            ));
        }
    }

    let mut logits_a = Vec::with_capacity(tokens.len() * v);
    let mut logits_b = Vec::with_capacity(tokens.len() * v);
    let stack = model_a.layer_count() * model_a.hidden_dim();
    let mut hidden_a = Vec::with_capacity(if with_hidden { tokens.len() * stack } else { 0 });
    let mut hidden_b = Vec::with_capacity(hidden_a.capacity());
    for t in 0..tokens.len() {
        let ctx = &tokens[..=t];
        logits_a.extend(model_a.logits(ctx));
        logits_b.extend(model_b.logits(ctx));
        if with_hidden {
            hidden_a.extend(model_a.hidden(ctx));
            hidden_b.extend(model_b.hidden(ctx));
        }
    }
    let stacks = with_hidden.then(|| {
        let wrap = |values| HiddenStates {
            layer_count: model_a.layer_count(),
            hidden_dim: model_a.hidden_dim(),
            values,
        };
        (wrap(hidden_a), wrap(hidden_b))
    });
    let (ha, hb) = match stacks {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    Ok(TeacherForcedTrace::new(
        v,
        tokens.to_vec(),
        logits_a,
        logits_b,
        ha,
        hb,
    )?)
}

/// Deterministic pseudo-random token sequence, handy for building contexts.
pub fn random_tokens(seed: u64, len: usize, vocab_size: usize) -> Vec<u32> {
    (0..len as u64)
        .map(|i| (splitmix64(mix(seed, i)) % vocab_size as u64) as u32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{encode_trace, Model};

    fn model(seed: u64, r: f64) -> SyntheticModel {
        SyntheticModel::new(SyntheticModelParams::new(seed, 3, r, 4.0), 32).unwrap()
    }

    #[test]
    fn identical_params_identical_logits() {
        let toks = random_tokens(1, 20, 32);
        let tr = gen_synthetic_trace(&model(7, 0.5), &model(7, 0.5), &toks, false).unwrap();
        for t in 0..tr.positions() {
            assert_eq!(tr.logits_a(t), tr.logits_b(t));
        }
    }

    #[test]
    fn deterministic_bytes() {
        let toks = random_tokens(2, 16, 32);
        let a = gen_synthetic_trace(&model(1, 0.0), &model(2, 1.0), &toks, false).unwrap();
        let b = gen_synthetic_trace(&model(1, 0.0), &model(2, 1.0), &toks, false).unwrap();
        assert_eq!(encode_trace(&a).unwrap(), encode_trace(&b).unwrap());
    }

    #[test]
    fn logits_depend_only_on_window() {
        let m = model(3, 0.0);
        // Same last three tokens, different history. Attractor is zero so the
        // window fully determines the logits.
        assert_eq!(m.logits(&[9, 1, 2, 3]), m.logits(&[4, 5, 1, 2, 3]));
        assert_ne!(m.logits(&[1, 2, 3]), m.logits(&[1, 2, 4]));
    }

    #[test]
    fn attractor_targets_token_two_back() {
        let base = model(3, 0.0);
        let hot = model(3, 100.0);
        let ctx = [5, 11, 7];
        let (z0, z1) = (base.logits(&ctx), hot.logits(&ctx));
        for i in 0..32 {
            if i == 11 {
                assert!((z1[i] - z0[i] - 100.0).abs() < 1e-4);
            } else {
                assert_eq!(z1[i], z0[i]);
            }
        }
    }

    #[test]
    fn rotation_is_orthogonal() {
        let q = rotation(5, 42);
        let eye = q.transpose() * &q;
        assert!((eye - DMatrix::identity(5, 5)).abs().max() < 1e-12);
    }

    #[test]
    fn hidden_shapes_and_errors() {
        let spec = vec![vec![1.0, 2.0, 3.0]; 2];
        let a = SyntheticModel::new(
            SyntheticModelParams::new(1, 2, 0.0, 1.0).with_hidden_spectrum(spec.clone()),
            8,
        )
        .unwrap();
        let b = SyntheticModel::new(
            SyntheticModelParams::new(2, 2, 0.0, 1.0).with_hidden_spectrum(spec),
            8,
        )
        .unwrap();
        let tr = gen_synthetic_trace(&a, &b, &[1, 2, 3], true).unwrap();
        assert_eq!(tr.layer_count(), 2);
        assert_eq!(tr.hidden_dim(), 3);
        assert!(tr.hidden(Model::A, 2, 1).is_some());
        assert!(gen_synthetic_trace(&a, &model(1, 0.0), &[1], true).is_err());
        assert!(matches!(
            gen_synthetic_trace(&a, &b, &[], false),
            Err(SyntheticError::EmptyTokens)
        ));
        assert!(matches!(
            gen_synthetic_trace(&a, &b, &[8], false),
            Err(SyntheticError::TokenOutOfRange { token: 8, .. })
        ));
        assert!((a.analytic_participation_ratio(0).unwrap() - 36.0 / 14.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(SyntheticModel::new(SyntheticModelParams::new(0, 0, 0.0, 1.0), 4).is_err());
        assert!(SyntheticModel::new(SyntheticModelParams::new(0, 1, -1.0, 1.0), 4).is_err());
        assert!(SyntheticModel::new(SyntheticModelParams::new(0, 1, 0.0, 0.0), 4).is_err());
        assert!(SyntheticModel::new(SyntheticModelParams::new(0, 1, 0.0, 1.0), 1).is_err());
        let ragged = SyntheticModelParams::new(0, 1, 0.0, 1.0)
            .with_hidden_spectrum(vec![vec![1.0], vec![1.0, 2.0]]);
        assert!(SyntheticModel::new(ragged, 4).is_err());
    }
}
