//! Disaggregated speculative decoding over a deterministic event simulator
//! and a real byte-stream transport.
//!
//! An edge worker drafts a bounded tree of candidate tokens with a small
//! draft model, ships it to a server that verifies the tree against the
//! target model in one logical pass, and commits the accepted path plus one
//! bonus token. While a verification is in flight the edge keeps drafting
//! past the submitted tree (proactive expansion); the server interleaves
//! verification across sessions and calibrates the edge draft depth so
//! requests arrive just as it frees up.
//!
//! Real LLMs are replaced by pluggable categorical oracles
//! ([`lm::ModelOracle`]) so every algorithmic property — most importantly
//! that the emitted token stream follows the target model's distribution
//! exactly — is checkable by enumeration instead of benchmarks.

pub mod config;
pub mod draft;
pub mod error;
pub mod harness;
pub mod lm;
pub mod metrics;
pub mod proactive;
pub mod scheduler;
pub mod session;
pub mod simnet;
pub mod transport;
pub mod verify;
pub mod wire;

pub use config::ExperimentConfig;
pub use draft::{best_path, build_draft_tree, DraftParams, DraftTree};
pub use error::Error;
pub use harness::{run_experiment, SummaryRow};
pub use lm::{Dist, ModelOracle, RngStream, TokenId};
pub use metrics::{cost_efficiency, Metrics, PricingConfig};
pub use simnet::{run_simulation, LatencyModel, Mode};
pub use verify::{verify_tree, VerifyOutcome};
