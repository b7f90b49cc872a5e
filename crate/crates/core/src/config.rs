//! Experiment configuration: a strict flat-key TOML file.
//!
//! Unknown keys are rejected so that an experiment file always means what it
//! says. Timing defaults follow the calibrated constants used throughout the
//! latency tests (94.2 ms verification, 11 ms per draft pass, 14.07 ms RTT).

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::lm::{ModelOracle, TokenId};
use crate::metrics::PricingConfig;
use crate::proactive::ExpansionPolicy;
use crate::scheduler::DepthPolicy;
use crate::session::EdgeSessionConfig;
use crate::simnet::{LatencyModel, Mode};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    pub vocab_size: usize,
    pub target: ModelSpec,
    pub draft: ModelSpec,
    #[serde(default)]
    pub tree: TreeSection,
    #[serde(default)]
    pub depth: DepthSection,
    #[serde(default)]
    pub proactive: ProactiveSection,
    #[serde(default = "default_rtt_ms")]
    pub rtt_ms: f64,
    #[serde(default)]
    pub jitter: f64,
    #[serde(default = "default_verify_ms")]
    pub verify_ms: f64,
    #[serde(default = "default_draft_pass_ms")]
    pub draft_pass_ms: f64,
    #[serde(default = "default_draft_pass_ms")]
    pub server_draft_pass_ms: f64,
    #[serde(default = "default_layer_split_edge_ms")]
    pub layer_split_edge_ms: f64,
    #[serde(default = "default_layer_split_server_ms")]
    pub layer_split_server_ms: f64,
    #[serde(default = "default_autoregressive_step_ms")]
    pub autoregressive_step_ms: f64,
    #[serde(default = "default_verify_batch_coef")]
    pub verify_batch_coef: f64,
    #[serde(default = "default_edge_batch_coef")]
    pub edge_batch_coef: f64,
    #[serde(default = "default_ewma_weight")]
    pub ewma_weight: f64,
    #[serde(default = "default_one")]
    pub sessions: u32,
    #[serde(default = "default_one")]
    pub verify_capacity: u32,
    #[serde(default = "default_one")]
    pub edge_batch: u32,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default)]
    pub pricing: PricingConfig,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn default_rtt_ms() -> f64 {
    14.07
}
fn default_verify_ms() -> f64 {
    94.2
}
fn default_draft_pass_ms() -> f64 {
    11.0
}
fn default_layer_split_edge_ms() -> f64 {
    63.5
}
fn default_layer_split_server_ms() -> f64 {
    21.1
}
fn default_autoregressive_step_ms() -> f64 {
    60.0
}
fn default_verify_batch_coef() -> f64 {
    0.15
}
fn default_edge_batch_coef() -> f64 {
    0.35
}
fn default_ewma_weight() -> f64 {
    0.2
}
fn default_one() -> u32 {
    1
}
fn default_max_new_tokens() -> u32 {
    256
}
fn default_budget() -> usize {
    32
}
fn default_branching() -> usize {
    2
}
fn default_temperature() -> f64 {
    0.7
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSection {
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_branching")]
    pub branching: usize,
}

impl Default for TreeSection {
    fn default() -> Self {
        Self {
            budget: default_budget(),
            branching: default_branching(),
        }
    }
}

/// `depth.policy = "auto"` or `depth.policy = 7`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthSpec {
    Auto,
    Fixed(u32),
}

impl DepthSpec {
    pub fn to_policy(self) -> DepthPolicy {
        match self {
            DepthSpec::Auto => DepthPolicy::Auto,
            DepthSpec::Fixed(d) => DepthPolicy::Fixed(d),
        }
    }
}

impl<'de> Deserialize<'de> for DepthSpec {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = DepthSpec;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("\"auto\" or a positive integer depth")
            }
            fn visit_str<E: serde::de::Error>(self, s: &str) -> std::result::Result<DepthSpec, E> {
                if s == "auto" {
                    Ok(DepthSpec::Auto)
                } else {
                    Err(E::custom(format!("unknown depth policy {s:?}")))
                }
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<DepthSpec, E> {
                if v >= 1 && v <= u32::MAX as i64 {
                    Ok(DepthSpec::Fixed(v as u32))
                } else {
                    Err(E::custom(format!("depth {v} out of range")))
                }
            }
        }
        de.deserialize_any(V)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthSection {
    #[serde(default = "default_depth_spec")]
    pub policy: DepthSpec,
}

fn default_depth_spec() -> DepthSpec {
    DepthSpec::Auto
}

impl Default for DepthSection {
    fn default() -> Self {
        Self {
            policy: DepthSpec::Auto,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProactiveSection {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_expansion_policy")]
    pub policy: ExpansionPolicySpec,
}

impl Default for ProactiveSection {
    fn default() -> Self {
        Self {
            enabled: true,
            policy: default_expansion_policy(),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
pub enum ExpansionPolicySpec {
    #[serde(rename = "single_best")]
    SingleBest,
    #[serde(rename = "all_leaves")]
    AllLeaves,
}

fn default_expansion_policy() -> ExpansionPolicySpec {
    ExpansionPolicySpec::SingleBest
}

impl ExpansionPolicySpec {
    pub fn to_policy(self) -> ExpansionPolicy {
        match self {
            ExpansionPolicySpec::SingleBest => ExpansionPolicy::SingleBest,
            ExpansionPolicySpec::AllLeaves => ExpansionPolicy::AllLeaves,
        }
    }
}

/// Optional cartesian sweep over modes and RTT values; empty lists mean the
/// base value only.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub mode: Vec<Mode>,
    #[serde(default)]
    pub rtt_ms: Vec<f64>,
}

/// A model oracle description: a context-free table or an n-gram map.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKindSpec,
    #[serde(default)]
    pub probs: Option<Vec<f64>>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub order: Option<usize>,
    /// Context rows keyed by space-separated token ids, e.g. `"0 3"`.
    #[serde(default)]
    pub rows: Option<HashMap<String, Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
pub enum ModelKindSpec {
    #[serde(rename = "table")]
    Table,
    #[serde(rename = "ngram")]
    Ngram,
}

impl ModelSpec {
    pub fn build(&self, vocab: usize) -> Result<ModelOracle> {
        match self.kind {
            ModelKindSpec::Table => {
                let probs = self
                    .probs
                    .as_ref()
                    .ok_or_else(|| Error::Config("table model needs `probs`".into()))?;
                if probs.len() != vocab {
                    return Err(Error::Config(format!(
                        "table model has {} probs, vocab_size is {vocab}",
                        probs.len()
                    )));
                }
                ModelOracle::table(probs, self.temperature)
            }
            ModelKindSpec::Ngram => {
                let order = self
                    .order
                    .ok_or_else(|| Error::Config("ngram model needs `order`".into()))?;
                let mut rows = HashMap::new();
                for (key, probs) in self.rows.clone().unwrap_or_default() {
                    let ctx: Vec<TokenId> = key
                        .split_whitespace()
                        .map(|t| {
                            t.parse::<TokenId>().map_err(|_| {
                                Error::Config(format!("bad token {t:?} in ngram row key {key:?}"))
                            })
                        })
                        .collect::<Result<_>>()?;
                    rows.insert(ctx, probs);
                }
                ModelOracle::ngram(vocab, order, rows, self.temperature)
            }
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.sessions < 1 || self.verify_capacity < 1 || self.edge_batch < 1 {
            return Err(Error::Config(
                "sessions, verify_capacity and edge_batch must be at least 1".into(),
            ));
        }
        if self.max_new_tokens < 1 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if !(0.0..=0.5).contains(&self.jitter) {
            return Err(Error::Config(format!(
                "jitter {} outside [0, 0.5]",
                self.jitter
            )));
        }
        if self.rtt_ms < 0.0 {
            return Err(Error::Config("rtt_ms must be nonnegative".into()));
        }
        for (name, v) in [
            ("verify_ms", self.verify_ms),
            ("draft_pass_ms", self.draft_pass_ms),
            ("server_draft_pass_ms", self.server_draft_pass_ms),
            ("autoregressive_step_ms", self.autoregressive_step_ms),
            ("ewma_weight", self.ewma_weight),
        ] {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.tree.budget < 1 || self.tree.branching < 1 {
            return Err(Error::Config(
                "tree.budget and tree.branching must be >= 1".into(),
            ));
        }
        if self.tree.branching > self.vocab_size {
            return Err(Error::Config(format!(
                "tree.branching {} exceeds vocab_size {}",
                self.tree.branching, self.vocab_size
            )));
        }
        if self.pricing.server_rate < 0.0 || self.pricing.edge_rate < 0.0 {
            return Err(Error::Config("pricing rates must be nonnegative".into()));
        }
        self.target.build(self.vocab_size)?;
        self.draft.build(self.vocab_size)?;
        for rtt in &self.sweep.rtt_ms {
            if *rtt < 0.0 {
                return Err(Error::Config("sweep rtt_ms must be nonnegative".into()));
            }
        }
        Ok(())
    }

    pub fn build_target(&self) -> Result<ModelOracle> {
        self.target.build(self.vocab_size)
    }

    pub fn build_draft(&self) -> Result<ModelOracle> {
        self.draft.build(self.vocab_size)
    }

    pub fn latency_model(&self) -> LatencyModel {
        LatencyModel {
            rtt_ms: self.rtt_ms,
            rtt_jitter: self.jitter,
            draft_pass_ms: self.draft_pass_ms,
            edge_batch: self.edge_batch,
            edge_batch_coef: self.edge_batch_coef,
            verify_ms: self.verify_ms,
            verify_batch_coef: self.verify_batch_coef,
            server_draft_pass_ms: self.server_draft_pass_ms,
            layer_split_edge_ms: self.layer_split_edge_ms,
            layer_split_server_ms: self.layer_split_server_ms,
            autoregressive_step_ms: self.autoregressive_step_ms,
        }
    }

    /// Proactive drafting is a property of the full protocol; the naive
    /// disaggregation baseline never uses it.
    pub fn effective_proactive(&self) -> bool {
        match self.mode {
            Mode::SpecEdge => self.proactive.enabled,
            _ => false,
        }
    }

    /// The naive baseline also forgoes batched interleaving.
    pub fn effective_capacity(&self) -> usize {
        match self.mode {
            Mode::DisaggNaive => 1,
            _ => self.verify_capacity as usize,
        }
    }

    /// Every session starts from a deterministic one-token prompt.
    pub fn prompt_for_session(&self, session: u64) -> Vec<TokenId> {
        vec![(session % self.vocab_size as u64) as TokenId]
    }

    pub fn edge_session_config(&self, session: u64) -> EdgeSessionConfig {
        let latency = self.latency_model();
        EdgeSessionConfig {
            session_id: session,
            seed: self.seed,
            budget: self.tree.budget,
            branching: self.tree.branching,
            depth_policy: self.depth.policy.to_policy(),
            proactive_enabled: self.effective_proactive(),
            expansion_policy: self.proactive.policy.to_policy(),
            max_new_tokens: self.max_new_tokens as usize,
            ewma_weight: self.ewma_weight,
            nominal_verify_ms: self.verify_ms,
            nominal_draft_pass_ms: latency.draft_pass_effective(),
            nominal_rtt_ms: self.rtt_ms,
        }
    }

    /// Expands the sweep section into concrete single-run configs.
    pub fn expand_sweep(&self) -> Vec<ExperimentConfig> {
        let modes: Vec<Mode> = if self.sweep.mode.is_empty() {
            vec![self.mode]
        } else {
            self.sweep.mode.clone()
        };
        let rtts: Vec<f64> = if self.sweep.rtt_ms.is_empty() {
            vec![self.rtt_ms]
        } else {
            self.sweep.rtt_ms.clone()
        };
        let mut out = Vec::new();
        for mode in &modes {
            for rtt in &rtts {
                let mut c = self.clone();
                c.mode = *mode;
                c.rtt_ms = *rtt;
                c.sweep = SweepSection::default();
                out.push(c);
            }
        }
        out
    }
}
