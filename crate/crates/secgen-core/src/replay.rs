//! Deterministic replay of recorded runs.
//!
//! A recorded run is re-driven by feeding its logged model replies and
//! analyzer outcomes through the scripted provider and analyzer. The
//! replayed transition sequence, prompt digests, and final code digest must
//! all match the recording exactly; anything else is a divergence.

use thiserror::Error;

use crate::crosschecker::ScriptedAnalyzer;
use crate::model_gateway::MockProvider;
use crate::orchestrator::{Orchestrator, RunConfig, RunInput, RunOutcome, Stage};
use crate::prompt_forge::{AdaptiveStore, PromptForge};
use crate::runstore::{EventPayload, RunLogEntry, RunStore, RunWriter, StoreError};
use crate::types::CodeArtifact;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("replay diverged from the recording: {0}")]
    DivergenceDetected(String),
    #[error("recording incomplete: {0}")]
    Incomplete(String),
}

/// Everything needed to re-drive a run.
pub struct RecordedRun<'a> {
    pub run_id: &'a str,
    pub config: &'a RunConfig,
    pub input: RunInput,
    pub entries: &'a [RunLogEntry],
}

fn transitions_of(entries: &[RunLogEntry]) -> Vec<(Option<Stage>, Stage, u32, u32)> {
    entries
        .iter()
        .filter_map(|e| match &e.payload {
            EventPayload::Transition {
                from,
                to,
                iteration,
                escalation_level,
            } => Some((*from, *to, *iteration, *escalation_level)),
            _ => None,
        })
        .collect()
}

fn request_digests_of(entries: &[RunLogEntry]) -> Vec<String> {
    entries
        .iter()
        .filter_map(|e| match &e.payload {
            EventPayload::ModelCall { request_digest, .. } => Some(request_digest.clone()),
            _ => None,
        })
        .collect()
}

fn final_digest_of(entries: &[RunLogEntry]) -> Option<Option<String>> {
    entries.iter().rev().find_map(|e| match &e.payload {
        EventPayload::Termination {
            final_code_digest, ..
        } => Some(final_code_digest.clone()),
        _ => None,
    })
}

/// Re-drive a recorded run and require an identical trajectory. Returns the
/// replayed outcome (which equals the recorded one when no divergence is
/// reported).
pub fn replay_recorded(
    recorded: RecordedRun<'_>,
    forge: &PromptForge,
    adaptive: &AdaptiveStore,
    catalog: &str,
) -> Result<RunOutcome, ReplayError> {
    let replies: Vec<String> = recorded
        .entries
        .iter()
        .filter_map(|e| match &e.payload {
            EventPayload::ModelCall { reply_text, .. } => Some(reply_text.clone()),
            _ => None,
        })
        .collect();
    let scans: Vec<_> = recorded
        .entries
        .iter()
        .filter_map(|e| match &e.payload {
            EventPayload::AnalyzerScan { outcome, .. } => Some(outcome.clone()),
            _ => None,
        })
        .collect();
    let recorded_final = final_digest_of(recorded.entries)
        .ok_or_else(|| ReplayError::Incomplete("no termination event".to_string()))?;

    let provider = MockProvider::scripted(replies);
    let analyzer = ScriptedAnalyzer::new(scans);
    let orchestrator = Orchestrator {
        config: recorded.config,
        forge,
        adaptive,
        provider: &provider,
        analyzer: &analyzer,
        catalog,
    };
    let mut writer = RunWriter::memory(recorded.run_id);
    let outcome = orchestrator
        .execute_run(recorded.run_id, recorded.input, &mut writer)
        .map_err(|e| ReplayError::DivergenceDetected(format!("replay run failed: {e}")))?;

    let recorded_transitions = transitions_of(recorded.entries);
    let replayed_transitions = transitions_of(writer.entries());
    if recorded_transitions != replayed_transitions {
        return Err(ReplayError::DivergenceDetected(format!(
            "transition sequence mismatch: recorded {} steps, replayed {}",
            recorded_transitions.len(),
            replayed_transitions.len()
        )));
    }
    let recorded_requests = request_digests_of(recorded.entries);
    let replayed_requests = request_digests_of(writer.entries());
    if recorded_requests != replayed_requests {
        let first = recorded_requests
            .iter()
            .zip(&replayed_requests)
            .position(|(a, b)| a != b)
            .map(|i| i.to_string())
            .unwrap_or_else(|| "length".to_string());
        return Err(ReplayError::DivergenceDetected(format!(
            "prompt digest mismatch at call {first}"
        )));
    }
    let replayed_final = outcome.final_code.as_ref().map(CodeArtifact::digest);
    if recorded_final != replayed_final {
        return Err(ReplayError::DivergenceDetected(
            "final code digest mismatch".to_string(),
        ));
    }
    Ok(outcome)
}

/// Replay a run from the store: the manifest supplies the effective config
/// and prompt, the log supplies replies and scans.
pub fn replay(
    store: &RunStore,
    run_id: &str,
    forge: &PromptForge,
    adaptive: &AdaptiveStore,
    catalog: &str,
) -> Result<RunOutcome, ReplayError> {
    let row = store.manifest_row_for(run_id)?;
    let entries = store.read_log(run_id)?;
    let input = match &row.nl_prompt {
        Some(prompt) => RunInput::NlPrompt(prompt.clone()),
        None => {
            // Fix-only runs snapshot their ground-truth code before the
            // first transition.
            let first_snapshot = entries.iter().find_map(|e| match &e.payload {
                EventPayload::CodeSnapshot {
                    version,
                    language,
                    lineage,
                    source,
                    ..
                } => Some(CodeArtifact {
                    language: *language,
                    source: source.clone(),
                    version: *version,
                    lineage: lineage.clone(),
                }),
                _ => None,
            });
            RunInput::GroundTruthCode(first_snapshot.ok_or_else(|| {
                ReplayError::Incomplete("no code snapshot for a fix-mode run".to_string())
            })?)
        }
    };
    replay_recorded(
        RecordedRun {
            run_id,
            config: &row.config,
            input,
            entries: &entries,
        },
        forge,
        adaptive,
        catalog,
    )
}
