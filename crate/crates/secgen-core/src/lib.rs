//! Engine that turns a natural-language programming request into
//! security-hardened code.
//!
//! The pipeline generates code from a plain-English prompt, asks the model to
//! identify and fix MITRE Top-25 weaknesses under a reward-framed prompt, and
//! cross-checks model-declared-clean code with a static analyzer whose
//! findings feed further refinement rounds. Batches of runs are evaluated
//! with fix-success-rate trajectories and an optional pass@1 hook.
//!
//! Module map:
//! - [`orchestrator`] — the per-run state machine, iteration budget, and
//!   escalation ladder.
//! - [`prompt_forge`] — byte-stable template rendering and adaptive examples.
//! - [`model_gateway`] — chat-completion providers (live HTTP + scripted
//!   mock).
//! - [`response_parser`] — tolerant reply-to-record conversion.
//! - [`crosschecker`] — compile + static scan + SARIF ingestion.
//! - [`scorekeeper`] — the authoritative reward ledger.
//! - [`corpus`] — prompt dataset loading, dedup, and summaries.
//! - [`metrics`] — FSR, pass@1, and report rendering.
//! - [`runstore`] — append-only event log with deterministic replay.
//! - [`batch`] — the data-parallel batch driver.

pub mod batch;
pub mod corpus;
pub mod crosschecker;
pub mod metrics;
pub mod model_gateway;
pub mod orchestrator;
pub mod prompt_forge;
pub mod replay;
pub mod response_parser;
pub mod runstore;
pub mod scenario;
pub mod scorekeeper;
pub mod types;

/// Hex SHA-256 of a byte string; the digest used throughout the run log.
pub fn digest_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in out {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}
