//! Static logit-bias injection and the greedy decoding loop.
//!
//! The bias is the mean logit shift between the two models of a trace,
//! restricted to the `K` tokens whose rank improved most under model B.
//! Decoding runs over any [`LogitProvider`]: trace replay (teacher-forced
//! only), the synthetic model, or a remote model speaking HFLP/1.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::{
    argmax_token, entropy, ranks_of_slice, softmax_with_temperature, DistributionError, LogitVector,
};
use crate::metrics::{
    diversity_report, rank_in_row, DiversityReport, MetricsError, ProvenanceHistogram,
};
use crate::protocol::ProtocolError;
use crate::synthetic::SyntheticModel;
use crate::trace::{Model, TeacherForcedTrace};

#[derive(Debug, Error)]
pub enum InjectionError {
    #[error("K = {k} exceeds vocab size {vocab}")]
    KExceedsVocab { k: usize, vocab: usize },
    #[error("shape mismatch: logits have {logits} entries, bias has {bias}")]
    ShapeMismatch { logits: usize, bias: usize },
    #[error("invalid injection spec: {0}")]
    InvalidSpec(String),
    #[error("token {token} is outside the vocabulary ({vocab})")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("alpha list is empty")]
    NoAlphas,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, InjectionError>;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("trace replay exhausted: context of length {requested} exceeds {available} positions")]
    ProviderExhausted { requested: usize, available: usize },
    #[error("trace replay cannot answer a context that departs from the trace at position {0}")]
    ContextMismatch(usize),
    #[error("empty context")]
    EmptyContext,
    #[error("token {token} is outside the vocabulary ({vocab})")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("provider returned invalid logits")]
    InvalidLogits,
    #[error("remote error {code}: {message}")]
    Remote { code: u32, message: String },
    #[error(transparent)]
    RemoteProtocolError(#[from] ProtocolError),
}

/// Hidden stack returned alongside logits (`layer_count x hidden_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStack {
    pub layer_count: usize,
    pub hidden_dim: usize,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderOutput {
    pub logits: Vec<f32>,
    pub hidden: Option<HiddenStack>,
}

/// Anything that maps a token context to next-token logits.
pub trait LogitProvider {
    fn forward(
        &mut self,
        context: &[u32],
        want_hidden: bool,
    ) -> std::result::Result<ProviderOutput, ProviderError>;

    fn logits(&mut self, context: &[u32]) -> std::result::Result<LogitVector, ProviderError> {
        let out = self.forward(context, false)?;
        LogitVector::from_f32(&out.logits).map_err(|_| ProviderError::InvalidLogits)
    }
}

impl<P: LogitProvider + ?Sized> LogitProvider for &mut P {
    fn forward(
        &mut self,
        context: &[u32],
        want_hidden: bool,
    ) -> std::result::Result<ProviderOutput, ProviderError> {
        (**self).forward(context, want_hidden)
    }
}

impl LogitProvider for SyntheticModel {
    fn forward(
        &mut self,
        context: &[u32],
        want_hidden: bool,
    ) -> std::result::Result<ProviderOutput, ProviderError> {
        if context.is_empty() {
            return Err(ProviderError::EmptyContext);
        }
        let vocab = self.vocab_size();
        if let Some(&token) = context.iter().find(|&&t| t as usize >= vocab) {
            return Err(ProviderError::TokenOutOfRange { token, vocab });
        }
        let hidden = (want_hidden && self.layer_count() > 0).then(|| HiddenStack {
            layer_count: self.layer_count(),
            hidden_dim: self.hidden_dim(),
            values: self.hidden(context),
        });
        Ok(ProviderOutput {
            logits: SyntheticModel::logits(self, context),
            hidden,
        })
    }
}

/// Replays one side of a trace. Only contexts that are prefixes of the trace's
/// token sequence can be answered.
#[derive(Debug, Clone, Copy)]
pub struct TraceReplay<'a> {
    trace: &'a TeacherForcedTrace,
    model: Model,
}

impl<'a> TraceReplay<'a> {
    pub fn new(trace: &'a TeacherForcedTrace, model: Model) -> Self {
        TraceReplay { trace, model }
    }
}

impl LogitProvider for TraceReplay<'_> {
    fn forward(
        &mut self,
        context: &[u32],
        want_hidden: bool,
    ) -> std::result::Result<ProviderOutput, ProviderError> {
        if context.is_empty() {
            return Err(ProviderError::EmptyContext);
        }
        let available = self.trace.positions();
        if context.len() > available {
            return Err(ProviderError::ProviderExhausted {
                requested: context.len(),
                available,
            });
        }
        if let Some(i) = context
            .iter()
            .zip(self.trace.tokens())
            .position(|(a, b)| a != b)
        {
            return Err(ProviderError::ContextMismatch(i));
        }
        let t = context.len() - 1;
        let hidden = if want_hidden {
            self.trace
                .hidden_stack(self.model, t)
                .map(|values| HiddenStack {
                    layer_count: self.trace.layer_count(),
                    hidden_dim: self.trace.hidden_dim(),
                    values: values.to_vec(),
                })
        } else {
            None
        };
        Ok(ProviderOutput {
            logits: self.trace.logits(self.model, t).to_vec(),
            hidden,
        })
    }
}

/// Configuration of one static-bias injection: `z + alpha * delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub k: usize,
    pub alpha: f64,
    pub delta: Vec<f64>,
    pub excluded_tokens: BTreeSet<u32>,
}

impl InjectionSpec {
    pub fn new(
        k: usize,
        alpha: f64,
        delta: Vec<f64>,
        excluded_tokens: BTreeSet<u32>,
    ) -> Result<Self> {
        let spec = InjectionSpec {
            k,
            alpha,
            delta,
            excluded_tokens,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(InjectionError::InvalidSpec(format!(
                "alpha {} must be finite and >= 0",
                self.alpha
            )));
        }
        if self.delta.iter().any(|d| !d.is_finite()) {
            return Err(InjectionError::InvalidSpec(
                "delta has non-finite entries".into(),
            ));
        }
        let support = self.support();
        if support.len() > self.k {
            return Err(InjectionError::InvalidSpec(format!(
                "delta support {} exceeds K = {}",
                support.len(),
                self.k
            )));
        }
        if let Some(t) = support.iter().find(|t| self.excluded_tokens.contains(t)) {
            return Err(InjectionError::InvalidSpec(format!(
                "excluded token {t} carries a bias"
            )));
        }
        Ok(())
    }

    pub fn support(&self) -> Vec<u32> {
        self.delta
            .iter()
            .enumerate()
            .filter(|(_, d)| **d != 0.0)
            .map(|(i, _)| i as u32)
            .collect()
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        let mut s = self.clone();
        s.alpha = alpha;
        s.validate()?;
        Ok(s)
    }

    /// Selects the top-`k` rank-improved tokens of `trace` and their mean shift.
    pub fn from_trace(
        trace: &TeacherForcedTrace,
        k: usize,
        excluded_tokens: BTreeSet<u32>,
        alpha: f64,
    ) -> Result<Self> {
        let selected = extract_rank_improved_tokens(trace, k, &excluded_tokens)?;
        let delta = compute_delta(trace, &selected)?;
        Self::new(k, alpha, delta, excluded_tokens)
    }
}

/// Sum over positions of `rank_A(v) - rank_B(v)` for every token.
fn rank_improvement_sums(trace: &TeacherForcedTrace) -> Vec<i64> {
    let v = trace.vocab_size();
    let mut sums = vec![0i64; v];
    for t in 0..trace.positions() {
        let ra = ranks_of_slice(trace.logits_a(t));
        let rb = ranks_of_slice(trace.logits_b(t));
        for (s, (a, b)) in sums.iter_mut().zip(ra.iter().zip(&rb)) {
            *s += i64::from(*a) - i64::from(*b);
        }
    }
    sums
}

/// Mean rank improvement (`rank_A - rank_B`, positive = promoted by B) per token.
pub fn mean_rank_improvement(trace: &TeacherForcedTrace) -> Vec<f64> {
    let n = trace.positions() as f64;
    rank_improvement_sums(trace)
        .into_iter()
        .map(|s| s as f64 / n)
        .collect()
}

/// Top-`k` tokens by mean rank improvement, skipping `excluded`; ties go to the
/// smaller token id.
pub fn extract_rank_improved_tokens(
    trace: &TeacherForcedTrace,
    k: usize,
    excluded: &BTreeSet<u32>,
) -> Result<Vec<u32>> {
    let vocab = trace.vocab_size();
    if k > vocab {
        return Err(InjectionError::KExceedsVocab { k, vocab });
    }
    // Position count is shared, so ordering by the integer sums is exact.
    let sums = rank_improvement_sums(trace);
    let mut candidates: Vec<u32> = (0..vocab as u32)
        .filter(|t| !excluded.contains(t))
        .collect();
    candidates.sort_by(|&a, &b| sums[b as usize].cmp(&sums[a as usize]).then(a.cmp(&b)));
    candidates.truncate(k);
    Ok(candidates)
}

/// Mean `logits_B - logits_A` on `selected`, zero elsewhere.
pub fn compute_delta(trace: &TeacherForcedTrace, selected: &[u32]) -> Result<Vec<f64>> {
    let vocab = trace.vocab_size();
    let mut delta = vec![0.0; vocab];
    if let Some(&token) = selected.iter().find(|&&t| t as usize >= vocab) {
        return Err(InjectionError::TokenOutOfRange { token, vocab });
    }
    let n = trace.positions() as f64;
    for &tok in selected {
        let i = tok as usize;
        let sum: f64 = (0..trace.positions())
            .map(|t| f64::from(trace.logits_b(t)[i]) - f64::from(trace.logits_a(t)[i]))
            .sum();
        delta[i] = sum / n;
    }
    Ok(delta)
}

pub fn inject_logits(z: &LogitVector, spec: &InjectionSpec) -> Result<LogitVector> {
    if z.len() != spec.delta.len() {
        return Err(InjectionError::ShapeMismatch {
            logits: z.len(),
            bias: spec.delta.len(),
        });
    }
    if spec.alpha == 0.0 {
        return Ok(z.clone());
    }
    let out = z
        .values()
        .iter()
        .zip(&spec.delta)
        .map(|(x, d)| if *d == 0.0 { *x } else { x + spec.alpha * d })
        .collect();
    Ok(LogitVector::new(out)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub tokens: Vec<u32>,
    /// Rank of each chosen token under the reference provider, when one was given.
    pub reference_ranks: Option<Vec<u32>>,
    /// Entropy (nats) of the distribution each token was chosen from.
    pub entropies: Vec<f64>,
}

impl DecodeResult {
    pub fn provenance(&self) -> Option<ProvenanceHistogram> {
        let ranks = self.reference_ranks.as_ref()?;
        let mut h = ProvenanceHistogram::default();
        ranks.iter().for_each(|&r| h.record(r));
        Some(h)
    }
}

/// Greedy (argmax) decoding for `steps` tokens after `prompt`.
pub fn greedy_decode(
    provider: &mut dyn LogitProvider,
    prompt: &[u32],
    steps: usize,
    spec: Option<&InjectionSpec>,
    mut reference: Option<&mut dyn LogitProvider>,
) -> Result<DecodeResult> {
    if prompt.is_empty() {
        return Err(InjectionError::EmptyPrompt);
    }
    if let Some(s) = spec {
        s.validate()?;
    }
    let mut context = prompt.to_vec();
    let mut tokens = Vec::with_capacity(steps);
    let mut entropies = Vec::with_capacity(steps);
    let mut ranks = reference.as_ref().map(|_| Vec::with_capacity(steps));
    for _ in 0..steps {
        let mut z = provider.logits(&context)?;
        if let Some(s) = spec {
            z = inject_logits(&z, s)?;
        }
        let next = argmax_token(&z);
        entropies.push(entropy(&softmax_with_temperature(&z, 1.0)?));
        if let (Some(r), Some(out)) = (reference.as_deref_mut(), ranks.as_mut()) {
            let row = r.forward(&context, false)?.logits;
            if next as usize >= row.len() {
                return Err(InjectionError::TokenOutOfRange {
                    token: next,
                    vocab: row.len(),
                });
            }
            out.push(rank_in_row(&row, next));
        }
        tokens.push(next);
        context.push(next);
    }
    Ok(DecodeResult {
        tokens,
        reference_ranks: ranks,
        entropies,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweepRow {
    pub alpha: f64,
    pub diversity: DiversityReport,
    pub generations: Vec<Vec<u32>>,
}

/// Decodes every prompt once per alpha and summarizes diversity.
pub fn alpha_sweep(
    provider: &mut dyn LogitProvider,
    prompts: &[Vec<u32>],
    spec_base: &InjectionSpec,
    alphas: &[f64],
    steps: usize,
) -> Result<Vec<AlphaSweepRow>> {
    if alphas.is_empty() {
        return Err(InjectionError::NoAlphas);
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let spec = spec_base.with_alpha(alpha)?;
        let generations = prompts
            .iter()
            .map(|p| greedy_decode(provider, p, steps, Some(&spec), None).map(|r| r.tokens))
            .collect::<Result<Vec<_>>>()?;
        rows.push(AlphaSweepRow {
            alpha,
            diversity: diversity_report(&generations)?,
            generations,
        });
    }
    Ok(rows)
}
