//! Temporal graph-of-reasons engine: per-expert reasoning runs that grow a
//! timestamped graph under a verifier-gated loop, a severity-routed
//! multi-agent case pipeline, run metrics and reward tooling.

pub mod backends;
pub mod engine;
pub mod graph;
pub mod knowledge;
pub mod metrics;
pub mod orchestrator;
pub mod rlvr;
pub mod store;
