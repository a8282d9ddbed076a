//! Rank-reordering diagnostics and diversity metrics.
//!
//! Trace-level functions return a [`MetricSummary`] over the positions of one
//! sequence. Reports take each sequence's mean and summarize across
//! sequences.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::{argmax_slice, ranks_of_slice};
use crate::stats::{mean_se, spearman_from_ranks, MetricSummary, StatsError};
use crate::trace::{Model, TeacherForcedTrace};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence of length {len} is shorter than n = {n}")]
    SequenceShorterThanN { len: usize, n: usize },
    #[error("trace has {0} positions; at least 2 are needed")]
    TraceTooShort(usize),
    #[error("vocab mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: usize, found: usize },
    #[error("no traces supplied")]
    NoTraces,
    #[error(transparent)]
    Stats(#[from] StatsError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Original-rank bins of the tokens the fine-tuned model picks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceHistogram {
    pub rank1: u64,
    pub rank2_10: u64,
    pub rank11_199: u64,
    pub rank200_plus: u64,
    pub total: u64,
}

impl ProvenanceHistogram {
    pub fn record(&mut self, rank: u32) {
        match rank {
            1 => self.rank1 += 1,
            2..=10 => self.rank2_10 += 1,
            11..=199 => self.rank11_199 += 1,
            _ => self.rank200_plus += 1,
        }
        self.total += 1;
    }

    pub fn merge(&mut self, other: &ProvenanceHistogram) {
        self.rank1 += other.rank1;
        self.rank2_10 += other.rank2_10;
        self.rank11_199 += other.rank11_199;
        self.rank200_plus += other.rank200_plus;
        self.total += other.total;
    }

    /// `[rank1, 2-10, 11-199, >=200]` as fractions of `total`.
    pub fn fractions(&self) -> [f64; 4] {
        if self.total == 0 {
            return [0.0; 4];
        }
        let t = self.total as f64;
        [
            self.rank1 as f64 / t,
            self.rank2_10 as f64 / t,
            self.rank11_199 as f64 / t,
            self.rank200_plus as f64 / t,
        ]
    }

    /// Coarse `[rank1, 2-10, >10]` view.
    pub fn coarse_fractions(&self) -> [f64; 3] {
        let f = self.fractions();
        [f[0], f[1], f[2] + f[3]]
    }
}

/// One provenance snapshot per checkpoint, in checkpoint order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankShiftSeries {
    pub snapshots: Vec<ProvenanceHistogram>,
}

impl RankShiftSeries {
    pub fn fractions(&self) -> Vec<[f64; 4]> {
        self.snapshots
            .iter()
            .map(ProvenanceHistogram::fractions)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub ttr: MetricSummary,
    pub bigram_rep: MetricSummary,
    pub trigram_rep: MetricSummary,
}

fn per_position(values: Vec<f64>) -> Result<MetricSummary> {
    Ok(mean_se(&values)?)
}

pub fn top1_agreement(trace: &TeacherForcedTrace) -> Result<MetricSummary> {
    per_position(
        (0..trace.positions())
            .map(|t| {
                let same = argmax_slice(trace.logits_a(t)) == argmax_slice(trace.logits_b(t));
                f64::from(u8::from(same))
            })
            .collect(),
    )
}

/// Full-vocabulary Spearman ρ between A's and B's rankings at each position.
pub fn spearman_rho_per_step(trace: &TeacherForcedTrace) -> Result<MetricSummary> {
    per_position(
        (0..trace.positions())
            .map(|t| {
                spearman_from_ranks(
                    &ranks_of_slice(trace.logits_a(t)),
                    &ranks_of_slice(trace.logits_b(t)),
                )
            })
            .collect(),
    )
}

/// Rank of `token` among `row` under the tie-broken descending order, without
/// building the full ranking.
pub(crate) fn rank_in_row(row: &[f32], token: u32) -> u32 {
    let x = row[token as usize];
    let above = row
        .iter()
        .enumerate()
        .filter(|&(i, &y)| y > x || (y == x && (i as u32) < token))
        .count();
    above as u32 + 1
}

/// Bins B's argmax by its rank under A.
pub fn provenance_histogram(trace: &TeacherForcedTrace) -> ProvenanceHistogram {
    let mut hist = ProvenanceHistogram::default();
    for t in 0..trace.positions() {
        let w = argmax_slice(trace.logits_b(t));
        hist.record(rank_in_row(trace.logits_a(t), w));
    }
    hist
}

/// Fraction of positions whose argmax misses the reference next token.
pub fn top1_error_rate(trace: &TeacherForcedTrace, model: Model) -> Result<MetricSummary> {
    let n = trace.positions();
    if n < 2 {
        return Err(MetricsError::TraceTooShort(n));
    }
    let toks = trace.tokens();
    per_position(
        (0..n - 1)
            .map(|t| {
                f64::from(u8::from(
                    argmax_slice(trace.logits(model, t)) != toks[t + 1],
                ))
            })
            .collect(),
    )
}

/// Argmax token of `model` at every position (teacher-forced greedy picks).
pub fn argmax_sequence(trace: &TeacherForcedTrace, model: Model) -> Vec<u32> {
    (0..trace.positions())
        .map(|t| argmax_slice(trace.logits(model, t)))
        .collect()
}

pub fn ttr(tokens: &[u32]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    let unique: HashSet<u32> = tokens.iter().copied().collect();
    Ok(unique.len() as f64 / tokens.len() as f64)
}

/// `1 - unique n-grams / total n-grams`.
pub fn ngram_repetition(tokens: &[u32], n: usize) -> Result<f64> {
    if n == 0 || tokens.len() < n {
        return Err(MetricsError::SequenceShorterThanN {
            len: tokens.len(),
            n,
        });
    }
    let grams: Vec<&[u32]> = tokens.windows(n).collect();
    let unique: HashSet<&[u32]> = grams.iter().copied().collect();
    Ok(1.0 - unique.len() as f64 / grams.len() as f64)
}

/// TTR and bigram/trigram repetition summarized across sequences.
pub fn diversity_report<S: AsRef<[u32]>>(sequences: &[S]) -> Result<DiversityReport> {
    let mut ttrs = Vec::with_capacity(sequences.len());
    let mut bi = Vec::with_capacity(sequences.len());
    let mut tri = Vec::with_capacity(sequences.len());
    for s in sequences {
        let s = s.as_ref();
        ttrs.push(ttr(s)?);
        bi.push(ngram_repetition(s, 2)?);
        tri.push(ngram_repetition(s, 3)?);
    }
    Ok(DiversityReport {
        ttr: mean_se(&ttrs)?,
        bigram_rep: mean_se(&bi)?,
        trigram_rep: mean_se(&tri)?,
    })
}

pub fn rank_shift_series(traces: &[TeacherForcedTrace]) -> Result<RankShiftSeries> {
    let first = traces.first().ok_or(MetricsError::NoTraces)?;
    let v = first.vocab_size();
    let mut snapshots = Vec::with_capacity(traces.len());
    for tr in traces {
        if tr.vocab_size() != v {
            return Err(MetricsError::VocabMismatch {
                expected: v,
                found: tr.vocab_size(),
            });
        }
        snapshots.push(provenance_histogram(tr));
    }
    Ok(RankShiftSeries { snapshots })
}
