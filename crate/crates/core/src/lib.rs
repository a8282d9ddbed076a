//! Analysis toolkit for comparing an original and a fine-tuned language model
//! through teacher-forced traces: entropy-matched decoding metrics, rank
//! provenance, static-bias injection and hidden-state geometry.
//!
//! ```
//! use hyperscope::{entropy, softmax_with_temperature, LogitVector};
//!
//! let z = LogitVector::new(vec![0.0, 0.0]).unwrap();
//! let h = entropy(&softmax_with_temperature(&z, 1.0).unwrap());
//! assert!((h - std::f64::consts::LN_2).abs() < 1e-12);
//! ```

pub mod distribution;
pub mod geometry;
pub mod injection;
pub mod metrics;
pub mod protocol;
pub mod report;
pub mod stats;
pub mod synthetic;
pub mod trace;

pub use distribution::{
    argmax_token, entropy, ranks_of, softmax_with_temperature, solve_global_temperature,
    solve_temperature_for_entropy, DistributionError, LogitVector, ProbVector, RankVector,
    SolverOptions, TemperatureSolveResult,
};
pub use geometry::{
    covariance_spectrum, delta_dim_profile, layer_cosine, layer_l2, participation_ratio,
    participation_ratio_of, ActivationSample, CovarianceSpectrum, GeometryError, GeometryReport,
    LayerGeometry, PositionPolicy,
};
pub use injection::{
    alpha_sweep, compute_delta, extract_rank_improved_tokens, greedy_decode, inject_logits,
    mean_rank_improvement, DecodeResult, HiddenStack, InjectionError, InjectionSpec, LogitProvider,
    ProviderError, ProviderOutput, TraceReplay,
};
pub use metrics::{
    argmax_sequence, diversity_report, ngram_repetition, provenance_histogram, rank_shift_series,
    spearman_rho_per_step, top1_agreement, top1_error_rate, ttr, DiversityReport, MetricsError,
    ProvenanceHistogram, RankShiftSeries,
};
pub use protocol::{
    read_message, serve_connection, write_message, Message, ProtocolError, RemoteModel,
};
pub use report::{emit_report, run, ExperimentConfig, OutputFormat, Report, ReportError};
pub use stats::{
    binomial_test, mean_se, spearman_from_ranks, spearman_test, welch_t_test, wilson_interval,
    MetricSummary, StatsError, TestResult,
};
pub use synthetic::{gen_synthetic_trace, random_tokens, SyntheticModel, SyntheticModelParams};
pub use trace::{
    decode_trace, encode_trace, read_trace, write_trace, HiddenStates, Model, TeacherForcedTrace,
    TraceError, TraceHeader,
};
