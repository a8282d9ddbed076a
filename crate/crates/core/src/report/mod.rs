//! Experiment orchestration and machine-readable reports.
//!
//! A [`Report`] echoes its config, records a SHA-256 of every input trace and
//! states the conventions behind its numbers. Nothing time- or
//! host-dependent is recorded, so identical inputs give byte-identical JSON.

pub mod config;
pub mod json;
pub mod tables;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::distribution::{
    entropy_at, ranks_of_slice, solve_global_temperature, solve_temperature_for_entropy,
    DistributionError, LogitVector, TemperatureSolveResult,
};
use crate::geometry::{delta_dim_profile, GeometryError, GeometryReport};
use crate::injection::{
    compute_delta, extract_rank_improved_tokens, greedy_decode, InjectionError, InjectionSpec,
    LogitProvider,
};
use crate::metrics::{
    argmax_sequence, diversity_report, ngram_repetition, provenance_histogram, rank_shift_series,
    top1_agreement, top1_error_rate, ttr, DiversityReport, MetricsError, ProvenanceHistogram,
};
use crate::protocol::{ProtocolError, RemoteModel};
use crate::stats::{
    mean_se, spearman_from_ranks, spearman_test, welch_t_test, MetricSummary, StatsError,
    TestResult,
};
use crate::synthetic::{gen_synthetic_trace, SyntheticError, SyntheticModel};
use crate::trace::{decode_trace, Model, TeacherForcedTrace, TraceError};

pub use config::*;

pub const TOOLKIT: &str = "hyperscope";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("config: {0}")]
    Config(String),
    #[error("reading {path}: {source}")]
    Input { path: PathBuf, source: io::Error },
    #[error("trace {path}: {source}")]
    Trace { path: PathBuf, source: TraceError },
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Injection(#[from] InjectionError),
    #[error("remote provider: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("writing output: {0}")]
    Output(#[from] io::Error),
    #[error("serializing report: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Maps to the CLI exit statuses 2 and 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    InvalidInput,
    Runtime,
}

impl ReportError {
    pub fn class(&self) -> ErrorClass {
        use ReportError::*;
        match self {
            Config(_)
            | Input { .. }
            | Trace { .. }
            | Synthetic(_)
            | Geometry(_)
            | Distribution(_)
            | Metrics(_)
            | Stats(_) => ErrorClass::InvalidInput,
            Injection(e) => match e {
                InjectionError::Provider(_) => ErrorClass::Runtime,
                _ => ErrorClass::InvalidInput,
            },
            Protocol(_) | Output(_) | Serialize(_) | Csv(_) => ErrorClass::Runtime,
        }
    }
}

pub type Result<T> = std::result::Result<T, ReportError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
    pub vocab_size: usize,
    pub positions: usize,
    pub layer_count: usize,
    pub hidden_dim: usize,
    pub hidden_a: bool,
    pub hidden_b: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub toolkit: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub inputs: Vec<InputRecord>,
    pub conventions: BTreeMap<String, String>,
    pub results: Results,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Results {
    Validate(ValidateResults),
    EntropyMatch(EntropyMatchResults),
    Rank(RankResults),
    TriadSeries(TriadSeriesResults),
    Diversity(DiversityResults),
    Ablation(AblationResults),
    Geometry(GeometryReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTest {
    pub metric: String,
    pub result: Option<TestResult>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateResults {
    pub valid: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerContextTemperatures {
    pub summary: Option<MetricSummary>,
    pub min: Option<f64>,
    pub median: Option<f64>,
    pub max: Option<f64>,
    pub solved: usize,
    pub clamped: usize,
    pub skipped: usize,
}

/// One model/temperature column of the entropy-matched comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelColumn {
    pub label: String,
    pub temperature: f64,
    pub entropy: MetricSummary,
    pub ttr: MetricSummary,
    pub bigram_rep: MetricSummary,
    pub trigram_rep: MetricSummary,
    pub top1_agreement: MetricSummary,
    pub spearman_rho: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyMatchResults {
    pub target_entropy: f64,
    pub global_temperature: TemperatureSolveResult,
    pub per_context_temperature: PerContextTemperatures,
    pub columns: Vec<ModelColumn>,
    pub tests: Vec<NamedTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub input: String,
    pub top1_agreement: f64,
    pub spearman_rho: f64,
    pub top1_error_a: Option<f64>,
    pub top1_error_b: Option<f64>,
    pub provenance: ProvenanceHistogram,
    pub fractions: [f64; 4],
    pub coarse_fractions: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResults {
    pub per_trace: Vec<RankRow>,
    pub top1_agreement: MetricSummary,
    pub spearman_rho: MetricSummary,
    pub top1_error_a: Option<MetricSummary>,
    pub top1_error_b: Option<MetricSummary>,
    pub provenance: ProvenanceHistogram,
    pub fractions: [f64; 4],
    pub coarse_fractions: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriadPoint {
    pub input: String,
    pub ttr_b: f64,
    pub top1_error_b: Option<f64>,
    pub provenance: ProvenanceHistogram,
    pub fractions: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriadSeriesResults {
    pub checkpoints: Vec<TriadPoint>,
    /// Per checkpoint `[rank1, 2-10, 11-199, >=200]`.
    pub rank_shift: Vec<[f64; 4]>,
    pub ttr_series: Vec<f64>,
    pub top1_error_series: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityGroup {
    pub label: String,
    pub report: DiversityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityResults {
    pub groups: Vec<DiversityGroup>,
    pub tests: Vec<NamedTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub alpha: f64,
    pub diversity: DiversityReport,
    /// Ranks of the chosen tokens under the unbiased provider.
    pub provenance: ProvenanceHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResults {
    pub selected_tokens: Vec<u32>,
    /// `(token, delta)` over the bias support.
    pub delta: Vec<(u32, f64)>,
    pub baseline: DiversityReport,
    pub sweep: Vec<AblationRow>,
    /// Spearman test of TTR against alpha, baseline included as alpha = 0.
    pub ttr_vs_alpha: Option<TestResult>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_trace(base: &Path, p: &Path) -> Result<(TeacherForcedTrace, InputRecord)> {
    let full = resolve(base, p);
    let bytes = fs::read(&full).map_err(|source| ReportError::Input {
        path: p.to_path_buf(),
        source,
    })?;
    let trace = decode_trace(&bytes).map_err(|source| ReportError::Trace {
        path: p.to_path_buf(),
        source,
    })?;
    let rec = InputRecord {
        path: p.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        vocab_size: trace.vocab_size(),
        positions: trace.positions(),
        layer_count: trace.layer_count(),
        hidden_dim: trace.hidden_dim(),
        hidden_a: trace.has_hidden(Model::A),
        hidden_b: trace.has_hidden(Model::B),
    };
    Ok((trace, rec))
}

fn load_all(base: &Path, paths: &[PathBuf]) -> Result<(Vec<TeacherForcedTrace>, Vec<InputRecord>)> {
    if paths.is_empty() {
        return Err(ReportError::Config("at least one trace is required".into()));
    }
    let mut traces = Vec::with_capacity(paths.len());
    let mut recs = Vec::with_capacity(paths.len());
    for p in paths {
        let (t, r) = load_trace(base, p)?;
        traces.push(t);
        recs.push(r);
    }
    Ok((traces, recs))
}

fn conventions(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn report(
    config: &ExperimentConfig,
    inputs: Vec<InputRecord>,
    conv: &[(&str, &str)],
    results: Results,
) -> Report {
    Report {
        toolkit: TOOLKIT.to_string(),
        version: VERSION.to_string(),
        config: config.clone(),
        inputs,
        conventions: conventions(conv),
        results,
    }
}

/// Runs any config. Relative paths resolve against `base_dir`.
pub fn run(config: &ExperimentConfig, base_dir: &Path) -> Result<Report> {
    match config {
        ExperimentConfig::GenSynth(_) => Err(ReportError::Config(
            "gen-synth produces a trace, not a report; use generate_trace".into(),
        )),
        ExperimentConfig::Validate(c) => run_validate(config, c, base_dir),
        ExperimentConfig::EntropyMatch(c) => run_entropy_match(config, c, base_dir),
        ExperimentConfig::Rank(c) => run_rank(config, c, base_dir),
        ExperimentConfig::TriadSeries(c) => run_triad_series(config, c, base_dir),
        ExperimentConfig::Diversity(c) => run_diversity(config, c, base_dir),
        ExperimentConfig::Ablation(c) => run_ablation(config, c, base_dir),
        ExperimentConfig::Geometry(c) => run_geometry(config, c, base_dir),
    }
}

pub fn generate_trace(c: &GenSynthConfig) -> Result<TeacherForcedTrace> {
    let a = SyntheticModel::new(c.model_a.clone(), c.vocab_size)?;
    let b = SyntheticModel::new(c.model_b.clone(), c.vocab_size)?;
    let tokens = c.tokens.tokens(c.vocab_size);
    Ok(gen_synthetic_trace(&a, &b, &tokens, c.with_hidden)?)
}

fn run_validate(cfg: &ExperimentConfig, c: &ValidateConfig, base: &Path) -> Result<Report> {
    let (traces, inputs) = load_all(base, &c.traces)?;
    Ok(report(
        cfg,
        inputs,
        &[("format", "HFT1 version 1, little-endian")],
        Results::Validate(ValidateResults {
            valid: traces.len(),
        }),
    ))
}

fn rows_f64(trace: &TeacherForcedTrace, model: Model) -> Vec<Vec<f64>> {
    (0..trace.positions())
        .map(|t| {
            trace
                .logits(model, t)
                .iter()
                .map(|&x| f64::from(x))
                .collect()
        })
        .collect()
}

fn argmax_f64(row: &[f64]) -> u32 {
    crate::distribution::argmax_token(
        &LogitVector::new(row.to_vec())
            .unwrap_or_else(|_| LogitVector::new(vec![0.0]).expect("nonempty")),
    )
}

/// Per-sequence metrics of one column: entropy, diversity of the greedy
/// picks, and agreement / rank correlation against the reference rows.
struct SequenceMetrics {
    entropy: f64,
    ttr: f64,
    bigram: f64,
    trigram: f64,
    agreement: f64,
    rho: f64,
}

fn sequence_metrics(
    rows: &[Vec<f64>],
    temperature: f64,
    reference: &[Vec<f64>],
) -> Result<SequenceMetrics> {
    let n = rows.len() as f64;
    let entropy = rows.iter().map(|r| entropy_at(r, temperature)).sum::<f64>() / n;
    // Scaling is applied before argmax/ranking so the columns are computed,
    // not assumed equal.
    let scaled: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().map(|x| x / temperature).collect())
        .collect();
    let picks: Vec<u32> = scaled.iter().map(|r| argmax_f64(r)).collect();
    let ref_picks: Vec<u32> = reference.iter().map(|r| argmax_f64(r)).collect();
    let agreement = picks.iter().zip(&ref_picks).filter(|(a, b)| a == b).count() as f64 / n;
    let rho = scaled
        .iter()
        .zip(reference)
        .map(|(s, r)| spearman_from_ranks(&ranks_of_slice(r), &ranks_of_slice(s)))
        .sum::<f64>()
        / n;
    Ok(SequenceMetrics {
        entropy,
        ttr: ttr(&picks)?,
        bigram: ngram_repetition(&picks, 2).unwrap_or(0.0),
        trigram: ngram_repetition(&picks, 3).unwrap_or(0.0),
        agreement,
        rho,
    })
}

fn welch_or_note(metric: &str, a: &[f64], b: &[f64]) -> NamedTest {
    match welch_t_test(a, b, true) {
        Ok(r) => NamedTest {
            metric: metric.to_string(),
            note: r.degenerate.then(|| "both samples constant".to_string()),
            result: Some(r),
        },
        Err(e) => NamedTest {
            metric: metric.to_string(),
            result: None,
            note: Some(e.to_string()),
        },
    }
}

fn run_entropy_match(
    cfg: &ExperimentConfig,
    c: &EntropyMatchConfig,
    base: &Path,
) -> Result<Report> {
    let (traces, inputs) = load_all(base, &c.traces)?;
    let rows_a: Vec<Vec<Vec<f64>>> = traces.iter().map(|t| rows_f64(t, Model::A)).collect();
    let rows_b: Vec<Vec<Vec<f64>>> = traces.iter().map(|t| rows_f64(t, Model::B)).collect();

    // Target: mean fine-tuned entropy over all positions of all sequences.
    let all_b: Vec<&[f64]> = rows_b.iter().flatten().map(Vec::as_slice).collect();
    let target = all_b.iter().map(|r| entropy_at(r, 1.0)).sum::<f64>() / all_b.len() as f64;
    let all_a: Vec<&[f64]> = rows_a.iter().flatten().map(Vec::as_slice).collect();
    let global = solve_global_temperature(&all_a, target, c.solver)?;

    let mut per_ctx = Vec::new();
    let (mut clamped, mut skipped) = (0, 0);
    for r in &all_a {
        match solve_temperature_for_entropy(&LogitVector::new(r.to_vec())?, target, c.solver) {
            Ok(s) if !s.clamped => per_ctx.push(s.t_star),
            Ok(_) => clamped += 1,
            Err(DistributionError::ConstantLogits | DistributionError::TargetOutOfRange { .. }) => {
                skipped += 1
            }
            Err(e) => return Err(e.into()),
        }
    }
    let mut sorted = per_ctx.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let median = (!sorted.is_empty()).then(|| {
        let m = sorted.len() / 2;
        if sorted.len() % 2 == 1 {
            sorted[m]
        } else {
            0.5 * (sorted[m - 1] + sorted[m])
        }
    });
    let per_context_temperature = PerContextTemperatures {
        summary: mean_se(&per_ctx).ok(),
        min: sorted.first().copied(),
        median,
        max: sorted.last().copied(),
        solved: per_ctx.len(),
        clamped,
        skipped,
    };

    let columns_spec = [
        ("original@T=1", 1.0, &rows_a),
        ("original@T*", global.t_star, &rows_a),
        ("fine-tuned", 1.0, &rows_b),
    ];
    let mut columns = Vec::new();
    let mut per_seq: Vec<[Vec<f64>; 6]> = Vec::new();
    for (label, temperature, rows) in columns_spec {
        let mut m: [Vec<f64>; 6] = Default::default();
        for (seq, reference) in rows.iter().zip(&rows_a) {
            let s = sequence_metrics(seq, temperature, reference)?;
            for (slot, v) in
                m.iter_mut()
                    .zip([s.entropy, s.ttr, s.bigram, s.trigram, s.agreement, s.rho])
            {
                slot.push(v);
            }
        }
        columns.push(ModelColumn {
            label: label.to_string(),
            temperature,
            entropy: mean_se(&m[0])?,
            ttr: mean_se(&m[1])?,
            bigram_rep: mean_se(&m[2])?,
            trigram_rep: mean_se(&m[3])?,
            top1_agreement: mean_se(&m[4])?,
            spearman_rho: mean_se(&m[5])?,
        });
        per_seq.push(m);
    }
    let names = [
        "entropy",
        "ttr",
        "bigram_rep",
        "trigram_rep",
        "top1_agreement",
        "spearman_rho",
    ];
    let tests = names
        .iter()
        .enumerate()
        .map(|(i, name)| welch_or_note(name, &per_seq[2][i], &per_seq[1][i]))
        .collect();

    Ok(report(
        cfg,
        inputs,
        &[
            ("entropy_unit", "nats"),
            (
                "target_entropy",
                "mean fine-tuned entropy over all positions",
            ),
            (
                "temperature_mode",
                "columns use the global T*; per-context T* solved against the same target",
            ),
            ("diversity_source", "teacher-forced argmax sequences"),
            (
                "tests",
                "Welch two-sided, fine-tuned vs original@T*, per-sequence means",
            ),
            (
                "aggregation",
                "per-sequence mean, then mean +- SE across sequences",
            ),
        ],
        Results::EntropyMatch(EntropyMatchResults {
            target_entropy: target,
            global_temperature: global,
            per_context_temperature,
            columns,
            tests,
        }),
    ))
}

fn run_rank(cfg: &ExperimentConfig, c: &RankConfig, base: &Path) -> Result<Report> {
    let (traces, inputs) = load_all(base, &c.traces)?;
    let mut per_trace = Vec::new();
    let mut pooled = ProvenanceHistogram::default();
    for (tr, rec) in traces.iter().zip(&inputs) {
        let hist = provenance_histogram(tr);
        pooled.merge(&hist);
        per_trace.push(RankRow {
            input: rec.path.clone(),
            top1_agreement: top1_agreement(tr)?.mean,
            spearman_rho: crate::metrics::spearman_rho_per_step(tr)?.mean,
            top1_error_a: top1_error_rate(tr, Model::A).ok().map(|s| s.mean),
            top1_error_b: top1_error_rate(tr, Model::B).ok().map(|s| s.mean),
            fractions: hist.fractions(),
            coarse_fractions: hist.coarse_fractions(),
            provenance: hist,
        });
    }
    let col = |f: fn(&RankRow) -> Option<f64>| -> Option<MetricSummary> {
        let v: Vec<f64> = per_trace.iter().filter_map(f).collect();
        mean_se(&v).ok()
    };
    let results = RankResults {
        top1_agreement: col(|r| Some(r.top1_agreement)).ok_or(StatsError::EmptySample)?,
        spearman_rho: col(|r| Some(r.spearman_rho)).ok_or(StatsError::EmptySample)?,
        top1_error_a: col(|r| r.top1_error_a),
        top1_error_b: col(|r| r.top1_error_b),
        fractions: pooled.fractions(),
        coarse_fractions: pooled.coarse_fractions(),
        provenance: pooled,
        per_trace,
    };
    Ok(report(
        cfg,
        inputs,
        &[
            ("mode", "teacher-forced"),
            (
                "provenance_bins",
                "rank 1 / 2-10 / 11-199 / >=200 of B's argmax under A; coarse: 1 / 2-10 / >10",
            ),
            ("spearman", "full vocabulary, ties broken by token id"),
            (
                "aggregation",
                "per-sequence mean, then mean +- SE across sequences",
            ),
        ],
        Results::Rank(results),
    ))
}

fn run_triad_series(cfg: &ExperimentConfig, c: &TriadSeriesConfig, base: &Path) -> Result<Report> {
    let (traces, inputs) = load_all(base, &c.checkpoints)?;
    let series = rank_shift_series(&traces)?;
    let mut checkpoints = Vec::new();
    for ((tr, rec), hist) in traces.iter().zip(&inputs).zip(&series.snapshots) {
        checkpoints.push(TriadPoint {
            input: rec.path.clone(),
            ttr_b: ttr(&argmax_sequence(tr, Model::B))?,
            top1_error_b: top1_error_rate(tr, Model::B).ok().map(|s| s.mean),
            provenance: *hist,
            fractions: hist.fractions(),
        });
    }
    Ok(report(
        cfg,
        inputs,
        &[
            ("mode", "teacher-forced"),
            ("order", "checkpoints in config order"),
            ("ttr_source", "argmax sequence of model B"),
        ],
        Results::TriadSeries(TriadSeriesResults {
            rank_shift: series.fractions(),
            ttr_series: checkpoints.iter().map(|p| p.ttr_b).collect(),
            top1_error_series: checkpoints.iter().map(|p| p.top1_error_b).collect(),
            checkpoints,
        }),
    ))
}

fn per_sequence_values(seqs: &[Vec<u32>], f: impl Fn(&[u32]) -> f64) -> Vec<f64> {
    seqs.iter().map(|s| f(s)).collect()
}

fn run_diversity(cfg: &ExperimentConfig, c: &DiversityConfig, base: &Path) -> Result<Report> {
    if c.traces.is_empty() && c.sequences.is_empty() {
        return Err(ReportError::Config("need traces or sequences".into()));
    }
    let (traces, inputs) = if c.traces.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        load_all(base, &c.traces)?
    };
    let mut groups = Vec::new();
    let mut tests = Vec::new();
    if !traces.is_empty() {
        let reference: Vec<Vec<u32>> = traces.iter().map(|t| t.tokens().to_vec()).collect();
        let a: Vec<Vec<u32>> = traces
            .iter()
            .map(|t| argmax_sequence(t, Model::A))
            .collect();
        let b: Vec<Vec<u32>> = traces
            .iter()
            .map(|t| argmax_sequence(t, Model::B))
            .collect();
        for (label, seqs) in [
            ("reference", &reference),
            ("argmax-a", &a),
            ("argmax-b", &b),
        ] {
            groups.push(DiversityGroup {
                label: label.to_string(),
                report: diversity_report(seqs)?,
            });
        }
        let metric = |s: &[u32], which: usize| -> f64 {
            match which {
                0 => ttr(s).unwrap_or(0.0),
                n => ngram_repetition(s, n + 1).unwrap_or(0.0),
            }
        };
        for (i, name) in ["ttr", "bigram_rep", "trigram_rep"].iter().enumerate() {
            tests.push(welch_or_note(
                name,
                &per_sequence_values(&b, |s| metric(s, i)),
                &per_sequence_values(&a, |s| metric(s, i)),
            ));
        }
    }
    if !c.sequences.is_empty() {
        groups.push(DiversityGroup {
            label: "sequences".to_string(),
            report: diversity_report(&c.sequences)?,
        });
    }
    Ok(report(
        cfg,
        inputs,
        &[
            ("units", "token ids"),
            (
                "trace_sequences",
                "reference tokens and teacher-forced argmax picks of A and B",
            ),
            (
                "tests",
                "Welch two-sided, argmax-b vs argmax-a, per-sequence values",
            ),
        ],
        Results::Diversity(DiversityResults { groups, tests }),
    ))
}

fn provider_from(cfg: &ProviderConfig) -> Result<Box<dyn LogitProvider>> {
    Ok(match cfg {
        ProviderConfig::Synthetic { vocab_size, params } => {
            Box::new(SyntheticModel::new(params.clone(), *vocab_size)?)
        }
        ProviderConfig::Remote { address } => Box::new(RemoteModel::connect(address.as_str())?),
    })
}

fn run_ablation(cfg: &ExperimentConfig, c: &AblationConfig, base: &Path) -> Result<Report> {
    if c.alphas.is_empty() || c.alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(ReportError::Config(
            "alphas must be nonempty, finite and >= 0".into(),
        ));
    }
    if c.prompts.is_empty() || c.prompts.iter().any(Vec::is_empty) {
        return Err(ReportError::Config(
            "prompts must be nonempty sequences".into(),
        ));
    }
    if c.steps < 3 {
        return Err(ReportError::Config(
            "steps must be >= 3 for trigram metrics".into(),
        ));
    }
    let (trace, input) = load_trace(base, &c.delta_trace)?;
    let selected = extract_rank_improved_tokens(&trace, c.k, &c.excluded_tokens)?;
    let delta = compute_delta(&trace, &selected)?;
    let spec = InjectionSpec::new(c.k, 0.0, delta, c.excluded_tokens.clone())?;

    // One connection for the biased decodes and one for the reference ranks.
    let mut provider = provider_from(&c.provider)?;
    let mut reference = provider_from(&c.provider)?;

    let baseline_gens = c
        .prompts
        .iter()
        .map(|p| greedy_decode(provider.as_mut(), p, c.steps, None, None).map(|r| r.tokens))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let baseline = diversity_report(&baseline_gens)?;

    let mut sweep = Vec::with_capacity(c.alphas.len());
    for &alpha in &c.alphas {
        let s = spec.with_alpha(alpha)?;
        let mut hist = ProvenanceHistogram::default();
        let mut generations = Vec::with_capacity(c.prompts.len());
        for p in &c.prompts {
            let r = greedy_decode(
                provider.as_mut(),
                p,
                c.steps,
                Some(&s),
                Some(reference.as_mut()),
            )?;
            if let Some(h) = r.provenance() {
                hist.merge(&h);
            }
            generations.push(r.tokens);
        }
        sweep.push(AblationRow {
            alpha,
            diversity: diversity_report(&generations)?,
            provenance: hist,
        });
    }
    let xs: Vec<f64> = std::iter::once(0.0)
        .chain(sweep.iter().map(|r| r.alpha))
        .collect();
    let ys: Vec<f64> = std::iter::once(baseline.ttr.mean)
        .chain(sweep.iter().map(|r| r.diversity.ttr.mean))
        .collect();
    let ttr_vs_alpha = spearman_test(&xs, &ys).ok();

    Ok(report(
        cfg,
        vec![input],
        &[
            ("mode", "free-running greedy decoding"),
            (
                "rank_improvement",
                "mean over positions of rank_A - rank_B; ties by token id",
            ),
            (
                "delta",
                "mean logits_B - logits_A on the selected tokens, zero elsewhere",
            ),
            (
                "provenance",
                "rank of each chosen token under the unbiased provider",
            ),
            (
                "ttr_vs_alpha",
                "Spearman, mid-ranks, baseline included as alpha = 0",
            ),
        ],
        Results::Ablation(AblationResults {
            delta: selected
                .iter()
                .map(|&t| (t, spec.delta[t as usize]))
                .collect(),
            selected_tokens: selected,
            baseline,
            sweep,
            ttr_vs_alpha,
        }),
    ))
}

fn run_geometry(cfg: &ExperimentConfig, c: &GeometryConfig, base: &Path) -> Result<Report> {
    let (trace, input) = load_trace(base, &c.trace)?;
    let g = delta_dim_profile(&trace, &c.positions)?;
    Ok(report(
        cfg,
        vec![input],
        &[
            ("l2", "mean of per-token distances"),
            (
                "cosine",
                "mean of per-token cosines; zero vectors count as 0",
            ),
            (
                "participation_ratio",
                "mean-centred covariance, N-1 denominator, eigenvalues < 1e-10 * max clamped",
            ),
            ("delta_dim", "PR_B - PR_A per layer, independent per model"),
        ],
        Results::Geometry(g),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Json,
    Csv,
}

/// Writes the report. JSON goes to `out` as one file; CSV writes one file per
/// metric family into the directory `out`.
pub fn emit_report(report: &Report, format: OutputFormat, out: &Path) -> Result<Vec<PathBuf>> {
    match format {
        OutputFormat::Json => {
            fs::write(out, json::to_canonical_string(report)?)?;
            Ok(vec![out.to_path_buf()])
        }
        OutputFormat::Csv => {
            fs::create_dir_all(out)?;
            let mut written = Vec::new();
            for table in tables::tables(report) {
                let path = out.join(format!("{}.csv", table.name));
                fs::write(&path, table.to_csv()?)?;
                written.push(path);
            }
            Ok(written)
        }
    }
}
