//! Experiment configuration. The same schema is echoed verbatim into every
//! report, so a report's `config` block can be fed back in as a config file.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::distribution::SolverOptions;
use crate::geometry::PositionPolicy;
use crate::synthetic::{random_tokens, SyntheticModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    GenSynth(GenSynthConfig),
    Validate(ValidateConfig),
    EntropyMatch(EntropyMatchConfig),
    Rank(RankConfig),
    TriadSeries(TriadSeriesConfig),
    Diversity(DiversityConfig),
    Ablation(AblationConfig),
    Geometry(GeometryConfig),
}

impl ExperimentConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentConfig::GenSynth(_) => "gen-synth",
            ExperimentConfig::Validate(_) => "validate",
            ExperimentConfig::EntropyMatch(_) => "entropy-match",
            ExperimentConfig::Rank(_) => "rank",
            ExperimentConfig::TriadSeries(_) => "triad-series",
            ExperimentConfig::Diversity(_) => "diversity",
            ExperimentConfig::Ablation(_) => "ablation",
            ExperimentConfig::Geometry(_) => "geometry",
        }
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenSource {
    Explicit(Vec<u32>),
    Random { seed: u64, length: usize },
}

impl TokenSource {
    pub fn tokens(&self, vocab_size: usize) -> Vec<u32> {
        match self {
            TokenSource::Explicit(t) => t.clone(),
            TokenSource::Random { seed, length } => random_tokens(*seed, *length, vocab_size),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSynthConfig {
    pub vocab_size: usize,
    pub model_a: SyntheticModelParams,
    pub model_b: SyntheticModelParams,
    pub tokens: TokenSource,
    #[serde(default)]
    pub with_hidden: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    pub traces: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyMatchConfig {
    /// One trace per evaluation sequence.
    pub traces: Vec<PathBuf>,
    #[serde(default)]
    pub solver: SolverOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankConfig {
    pub traces: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriadSeriesConfig {
    /// One trace per training checkpoint, in checkpoint order.
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiversityConfig {
    #[serde(default)]
    pub traces: Vec<PathBuf>,
    #[serde(default)]
    pub sequences: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderConfig {
    Synthetic {
        vocab_size: usize,
        params: SyntheticModelParams,
    },
    Remote {
        address: String,
    },
}

impl ProviderConfig {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Free-running model the bias is injected into.
    pub provider: ProviderConfig,
    /// Teacher-forced trace the bias is extracted from.
    pub delta_trace: PathBuf,
    pub k: usize,
    #[serde(default)]
    pub excluded_tokens: BTreeSet<u32>,
    pub alphas: Vec<f64>,
    pub steps: usize,
    pub prompts: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub trace: PathBuf,
    #[serde(default = "default_positions")]
    pub positions: PositionPolicy,
}

fn default_positions() -> PositionPolicy {
    PositionPolicy::All
}
