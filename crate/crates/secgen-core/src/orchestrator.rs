//! The generate → identify/fix → cross-check state machine.
//!
//! One run is strictly sequential and owns its state. Stages:
//!
//! ```text
//! S1Generate ──► S2Identify ──vulns──► S2Fix ──► S2Identify …
//!                    │ clean
//!                    ▼
//!              S3Crosscheck ──findings──► S3Refix ──► S3Recheck
//!               │        ▲                               │ clean │ vulns
//!               ▼ empty  └───────────────────────────────┘       ▼
//!              Done(SecureConfirmed)                           S2Fix
//! ```
//!
//! Iteration accounting: one identify+fix cycle or one refix cycle costs one
//! iteration; identification, rechecks, and analyzer scans are free. A
//! compile failure injects a header-repair fix round (budgeted like any other
//! round, at most two consecutive attempts). Budget exhaustion can climb an
//! escalation ladder: temperature bumps up to the cap, then adaptive example
//! injection for one final budget.
//!
//! Every model call, parse result, analyzer report, and score settlement is
//! persisted to the run store before the next transition, which makes runs
//! replayable byte-for-byte.

// Step results intentionally carry the whole RunState through the error
// channel so a failed step can still be finalized and logged.
#![allow(clippy::result_large_err)]

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crosschecker::{cap_by_severity, Analyzer, ScanError};
use crate::model_gateway::{GatewayError, Message, ModelRequest, Provider};
use crate::prompt_forge::{
    inject_adaptive, strip_ep, AdaptiveStore, FixStrategy, ForgeError, PromptForge, RenderContext,
    RenderedPrompt, TemplateId, TemplateVariant,
};
use crate::response_parser::{
    extract_code, parse_fix, parse_identification, IdentificationOutcome, ParseError, VulnReport,
};
use crate::runstore::{EventPayload, RunWriter, StoreError};
use crate::scorekeeper::ScoreLedger;
use crate::types::{CodeArtifact, Cwe, Language};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    S1Generate,
    S2Identify,
    S2Fix,
    S3Crosscheck,
    S3Refix,
    S3Recheck,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminationKind {
    SecureConfirmed,
    BudgetExhausted,
    ProviderFailure,
    BuildFailureFinal,
    UserAbort,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminationReason {
    pub kind: TerminationKind,
    pub detail: String,
}

impl TerminationReason {
    pub fn new(kind: TerminationKind, detail: impl Into<String>) -> Self {
        TerminationReason {
            kind,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid run config: {0}")]
    Config(String),
}

/// Per-run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_provider_profile")]
    pub provider_profile: String,
    pub target_language: Language,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u32,
    #[serde(default)]
    pub temperature_initial: f64,
    #[serde(default = "default_temperature_step")]
    pub temperature_step: f64,
    #[serde(default = "default_temperature_cap")]
    pub temperature_cap: f64,
    #[serde(default = "default_true")]
    pub ep_enabled: bool,
    #[serde(default = "default_true")]
    pub crosscheck_enabled: bool,
    #[serde(default)]
    pub adaptive_enabled: bool,
    /// Opt-in temperature/adaptive ladder after budget exhaustion. The batch
    /// driver turns this on by default.
    #[serde(default)]
    pub escalation_enabled: bool,
    #[serde(default = "default_analyzer_profile")]
    pub analyzer_profile: String,
    #[serde(default)]
    pub strategy: FixStrategy,
    /// Most findings forwarded into one refix prompt.
    #[serde(default = "default_findings_cap")]
    pub findings_cap: usize,
}

fn default_provider_profile() -> String {
    "mock".to_string()
}
fn default_max_iterations() -> u32 {
    10
}
fn default_temperature_step() -> f64 {
    0.1
}
fn default_temperature_cap() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}
fn default_analyzer_profile() -> String {
    "offline".to_string()
}
fn default_findings_cap() -> usize {
    10
}

impl RunConfig {
    pub fn new(target_language: Language) -> Self {
        RunConfig {
            provider_profile: default_provider_profile(),
            target_language,
            max_iterations: default_max_iterations(),
            temperature_initial: 0.0,
            temperature_step: default_temperature_step(),
            temperature_cap: default_temperature_cap(),
            ep_enabled: true,
            crosscheck_enabled: true,
            adaptive_enabled: false,
            escalation_enabled: false,
            analyzer_profile: default_analyzer_profile(),
            strategy: FixStrategy::Ep,
            findings_cap: default_findings_cap(),
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let mut problems = Vec::new();
        if self.max_iterations < 1 {
            problems.push("max_iterations must be at least 1".to_string());
        }
        if self.temperature_initial > self.temperature_cap {
            problems.push(format!(
                "temperature_initial {} exceeds temperature_cap {}",
                self.temperature_initial, self.temperature_cap
            ));
        }
        if self.temperature_step <= 0.0 {
            problems.push("temperature_step must be positive".to_string());
        }
        if !(0.0..=2.0).contains(&self.temperature_initial) {
            problems.push("temperature_initial must be within [0, 2]".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(RunError::Config(problems.join("; ")))
        }
    }

    /// Human-readable label for the ablation configuration, used in reports.
    pub fn config_label(&self) -> String {
        match (self.ep_enabled, self.crosscheck_enabled) {
            (true, true) => "EP+crosscheck".to_string(),
            (true, false) => "LLM/C".to_string(),
            (false, true) => "no-EP+crosscheck".to_string(),
            (false, false) => "no-EP/no-crosscheck".to_string(),
        }
    }
}

#[derive(Debug, Clone)]
struct PendingSettlement {
    claimed: Vec<Cwe>,
    before: Vec<Cwe>,
}

/// The per-run state machine record.
#[derive(Debug, Clone)]
pub struct RunState {
    pub stage: Stage,
    pub iteration: u32,
    pub current_code: Option<CodeArtifact>,
    pub score: ScoreLedger,
    pub pending_vulns: Vec<VulnReport>,
    pub pending_findings: Vec<crate::crosschecker::AnalyzerFinding>,
    pub escalation_level: u32,
    pub termination: Option<TerminationReason>,
    pub temperature: f64,
    identify_visits: u32,
    consecutive_build_failures: u32,
    header_repair: bool,
    compiler_log: Option<String>,
    pending_settlement: Option<PendingSettlement>,
    fixed_history: Vec<(Cwe, String)>,
    adaptive_armed: bool,
    initially_vulnerable: Option<bool>,
    nl_prompt: Option<String>,
}

impl RunState {
    fn new(stage: Stage, config: &RunConfig) -> Self {
        RunState {
            stage,
            iteration: 0,
            current_code: None,
            score: ScoreLedger::new(),
            pending_vulns: Vec::new(),
            pending_findings: Vec::new(),
            escalation_level: 0,
            termination: None,
            temperature: config.temperature_initial,
            identify_visits: 0,
            consecutive_build_failures: 0,
            header_repair: false,
            compiler_log: None,
            pending_settlement: None,
            fixed_history: Vec::new(),
            adaptive_armed: config.adaptive_enabled,
            initially_vulnerable: None,
            nl_prompt: None,
        }
    }
}

/// What a run starts from: a natural-language request (full pipeline) or
/// ground-truth code (fix-only mode, skipping generation).
#[derive(Debug, Clone)]
pub enum RunInput {
    NlPrompt(String),
    GroundTruthCode(CodeArtifact),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IterationKind {
    S2Fix,
    S3Refix,
    HeaderRepair,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: u32,
    pub kind: IterationKind,
    pub claimed: Vec<Cwe>,
    pub escalation_level: u32,
}

pub type TransitionEdge = (Option<Stage>, Stage);

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: String,
    pub final_code: Option<CodeArtifact>,
    pub termination: TerminationReason,
    pub iterations: Vec<IterationRecord>,
    pub transitions: Vec<TransitionEdge>,
    pub initially_vulnerable: bool,
    /// Iteration count at the moment the run secured, if it did.
    pub secure_at: Option<u32>,
    pub escalation_level: u32,
}

/// True when an edge can appear in a legal run log. `from = None` marks run
/// entry (or escalation re-entry); any live stage may terminate into `Done`.
pub fn is_legal_edge(from: Option<Stage>, to: Stage) -> bool {
    match from {
        None => matches!(to, Stage::S1Generate | Stage::S2Identify),
        Some(Stage::Done) => false,
        Some(f) => {
            to == Stage::Done
                || matches!(
                    (f, to),
                    (Stage::S1Generate, Stage::S2Identify)
                        | (Stage::S2Identify, Stage::S2Fix)
                        | (Stage::S2Identify, Stage::S3Crosscheck)
                        | (Stage::S2Fix, Stage::S2Identify)
                        | (Stage::S3Crosscheck, Stage::S3Refix)
                        | (Stage::S3Refix, Stage::S3Recheck)
                        | (Stage::S3Recheck, Stage::S3Crosscheck)
                        | (Stage::S3Recheck, Stage::S2Fix)
                )
        }
    }
}

const IDENTIFY_REMINDER: &str = "Reminder: respond only in the required output format: Vulnerability Type | CWE ID | Justification | Response. If the code has no vulnerabilities, output \"no vulnerabilities\".";
const FIX_REMINDER: &str = "Reminder: present the complete fixed program in a single fenced code block, followed by the line: Fixed version | Original Score | Updated Score | List of Fixed Vulnerabilities & CWE ID.";

type RenderFn<'f> = Box<dyn Fn(&RenderContext) -> Result<RenderedPrompt, ForgeError> + 'f>;

enum StepFailure {
    Terminate(TerminationReason),
    Store(StoreError),
}

impl From<StoreError> for StepFailure {
    fn from(e: StoreError) -> Self {
        StepFailure::Store(e)
    }
}

fn provider_failure(detail: impl Into<String>) -> StepFailure {
    StepFailure::Terminate(TerminationReason::new(
        TerminationKind::ProviderFailure,
        detail,
    ))
}

/// Drives a single run. Collaborators are shared immutably, so many
/// orchestrators may execute concurrently as long as each owns its provider
/// scenario and writer.
pub struct Orchestrator<'a> {
    pub config: &'a RunConfig,
    pub forge: &'a PromptForge,
    pub adaptive: &'a AdaptiveStore,
    pub provider: &'a dyn Provider,
    pub analyzer: &'a dyn Analyzer,
    /// MITRE Top-25 catalog text for identification prompts.
    pub catalog: &'a str,
}

struct RunTrace {
    transitions: Vec<TransitionEdge>,
    iterations: Vec<IterationRecord>,
}

impl<'a> Orchestrator<'a> {
    /// Execute a full run: drive the state machine until termination,
    /// climbing the escalation ladder when configured.
    pub fn execute_run(
        &self,
        run_id: &str,
        input: RunInput,
        writer: &mut RunWriter,
    ) -> Result<RunOutcome, RunError> {
        self.config.validate()?;
        let mut trace = RunTrace {
            transitions: Vec::new(),
            iterations: Vec::new(),
        };
        let mut state = self.enter_run(input, writer, &mut trace)?;

        loop {
            if let Some(term) = state.termination.clone() {
                if term.kind == TerminationKind::BudgetExhausted && self.config.escalation_enabled {
                    let revived = self.escalate(state.clone());
                    if revived.termination.is_none() {
                        state = revived;
                        self.log_transition(writer, &mut trace, None, Stage::S2Identify, &state)?;
                        continue;
                    }
                }
                break;
            }
            state = match self.advance_inner(state, writer, &mut trace) {
                Ok(next) => next,
                Err(RunError::Store(e)) => return Err(RunError::Store(e)),
                Err(other) => return Err(other),
            };
        }

        let termination = state
            .termination
            .clone()
            .expect("loop exits only when terminated");
        let final_code = state.current_code.clone();
        writer.append(EventPayload::Termination {
            kind: termination.kind,
            detail: termination.detail.clone(),
            final_code_digest: final_code.as_ref().map(|c| c.digest()),
            iterations_used: state.iteration,
            escalation_level: state.escalation_level,
        })?;

        let secure_at =
            (termination.kind == TerminationKind::SecureConfirmed).then_some(state.iteration);
        Ok(RunOutcome {
            run_id: run_id.to_string(),
            final_code,
            termination,
            iterations: trace.iterations,
            transitions: trace.transitions,
            initially_vulnerable: state.initially_vulnerable.unwrap_or(false),
            secure_at,
            escalation_level: state.escalation_level,
        })
    }

    /// Perform exactly one state-machine transition. Public for tests and
    /// replay harnesses; `execute_run` is the normal entry point.
    pub fn advance(&self, state: RunState, writer: &mut RunWriter) -> Result<RunState, RunError> {
        let mut trace = RunTrace {
            transitions: Vec::new(),
            iterations: Vec::new(),
        };
        self.advance_inner(state, writer, &mut trace)
    }

    /// Climb the escalation ladder from a budget-exhausted terminal state:
    /// bump temperature by one step up to the cap, then arm adaptive
    /// prompting for one final budget, then stay terminal.
    pub fn escalate(&self, mut state: RunState) -> RunState {
        let exhausted = state
            .termination
            .as_ref()
            .is_some_and(|t| t.kind == TerminationKind::BudgetExhausted);
        if !exhausted {
            return state;
        }
        if state.temperature < self.config.temperature_cap - 1e-9 {
            state.escalation_level += 1;
            state.temperature = (self.config.temperature_initial
                + f64::from(state.escalation_level) * self.config.temperature_step)
                .min(self.config.temperature_cap);
        } else if !state.adaptive_armed {
            state.escalation_level += 1;
            state.adaptive_armed = true;
        } else {
            return state; // ladder exhausted: stays terminal
        }
        state.termination = None;
        state.stage = Stage::S2Identify;
        state.iteration = 0;
        state.pending_vulns.clear();
        state.pending_findings.clear();
        state.pending_settlement = None;
        state.header_repair = false;
        state.compiler_log = None;
        state
    }

    // -- internals ---------------------------------------------------------

    fn enter_run(
        &self,
        input: RunInput,
        writer: &mut RunWriter,
        trace: &mut RunTrace,
    ) -> Result<RunState, RunError> {
        match input {
            RunInput::NlPrompt(prompt) => {
                let mut state = RunState::new(Stage::S1Generate, self.config);
                state.nl_prompt = Some(prompt);
                self.log_transition(writer, trace, None, Stage::S1Generate, &state)?;
                Ok(state)
            }
            RunInput::GroundTruthCode(code) => {
                let mut state = RunState::new(Stage::S2Identify, self.config);
                writer.append(EventPayload::CodeSnapshot {
                    version: code.version,
                    language: code.language,
                    lineage: code.lineage.clone(),
                    source: code.source.clone(),
                    source_digest: code.digest(),
                })?;
                state.current_code = Some(code);
                self.log_transition(writer, trace, None, Stage::S2Identify, &state)?;
                Ok(state)
            }
        }
    }

    fn advance_inner(
        &self,
        state: RunState,
        writer: &mut RunWriter,
        trace: &mut RunTrace,
    ) -> Result<RunState, RunError> {
        debug_assert!(state.stage != Stage::Done, "advance on a finished run");
        let from = state.stage;
        let result = match state.stage {
            Stage::S1Generate => self.step_generate(state, writer),
            Stage::S2Identify => self.step_identify(state, writer),
            Stage::S2Fix => self.step_fix(state, writer, trace),
            Stage::S3Crosscheck => self.step_crosscheck(state, writer),
            Stage::S3Refix => self.step_refix(state, writer, trace),
            Stage::S3Recheck => self.step_recheck(state, writer),
            Stage::Done => unreachable!("advance precondition"),
        };
        match result {
            Ok(mut next) => {
                self.log_transition(writer, trace, Some(from), next.stage, &next)?;
                if next.stage == Stage::Done && next.termination.is_none() {
                    next.termination = Some(TerminationReason::new(
                        TerminationKind::ProviderFailure,
                        "terminal stage without reason",
                    ));
                }
                Ok(next)
            }
            Err((mut state, StepFailure::Terminate(reason))) => {
                state.stage = Stage::Done;
                state.termination = Some(reason);
                self.log_transition(writer, trace, Some(from), Stage::Done, &state)?;
                Ok(state)
            }
            Err((_, StepFailure::Store(e))) => Err(RunError::Store(e)),
        }
    }

    fn log_transition(
        &self,
        writer: &mut RunWriter,
        trace: &mut RunTrace,
        from: Option<Stage>,
        to: Stage,
        state: &RunState,
    ) -> Result<(), StoreError> {
        writer.append(EventPayload::Transition {
            from,
            to,
            iteration: state.iteration,
            escalation_level: state.escalation_level,
        })?;
        trace.transitions.push((from, to));
        Ok(())
    }

    fn base_ctx(&self, state: &RunState) -> RenderContext {
        RenderContext {
            code: state.current_code.clone(),
            language: Some(
                state
                    .current_code
                    .as_ref()
                    .map(|c| c.language)
                    .unwrap_or(self.config.target_language),
            ),
            score_current: state.score.current,
            cwe_catalog: self.catalog.to_string(),
            ..Default::default()
        }
    }

    /// Render, enforce the token budget (dropping oldest vulnerability
    /// reports, never code or instructions), call the provider, and log the
    /// call. Returns the reply text and the prompt it answered.
    fn call_model(
        &self,
        writer: &mut RunWriter,
        state: &RunState,
        label: &str,
        mut ctx: RenderContext,
        render: &dyn Fn(&RenderContext) -> Result<RenderedPrompt, ForgeError>,
        reminder: Option<&str>,
    ) -> Result<(String, RenderContext), (StepFailure, RenderContext)> {
        let mut rendered = match render(&ctx) {
            Ok(r) => r,
            Err(e) => return Err((provider_failure(format!("render failed: {e}")), ctx)),
        };
        let limit = self.provider.profile().token_limit;
        let mut truncated = 0usize;
        if rendered.estimated_tokens > limit && ctx.vuln_reports.len() > 1 {
            while rendered.estimated_tokens > limit && ctx.vuln_reports.len() > 1 {
                ctx.vuln_reports.remove(0);
                truncated += 1;
                rendered = match render(&ctx) {
                    Ok(r) => r,
                    Err(e) => return Err((provider_failure(format!("render failed: {e}")), ctx)),
                };
            }
        }
        let mut user_text = rendered.user.clone();
        if let Some(reminder) = reminder {
            user_text.push_str("\n\n");
            user_text.push_str(reminder);
        }
        let mut messages = Vec::new();
        if !rendered.system.is_empty() {
            messages.push(Message::system(rendered.system.clone()));
        }
        messages.push(Message::user(user_text.clone()));
        let request = ModelRequest {
            messages,
            temperature: state.temperature,
            max_output_tokens: self.provider.profile().max_output_tokens,
        };
        let reply = match self.provider.complete(&request) {
            Ok(r) => r,
            Err(e @ GatewayError::TokenBudgetExceeded { .. }) => {
                return Err((
                    provider_failure(format!("token budget exceeded after truncation: {e}")),
                    ctx,
                ))
            }
            Err(e) => return Err((provider_failure(e.to_string()), ctx)),
        };
        let log_result = writer.append(EventPayload::ModelCall {
            template: Some(label.to_string()),
            request_text: request.canonical_text(),
            reply_text: reply.text.clone(),
            request_digest: crate::digest_hex(request.canonical_text().as_bytes()),
            reply_digest: crate::digest_hex(reply.text.as_bytes()),
            temperature: state.temperature,
            retries: reply.retries,
            estimated_tokens: rendered.estimated_tokens,
            truncated_reports: truncated,
        });
        if let Err(e) = log_result {
            return Err((StepFailure::Store(e), ctx));
        }
        Ok((reply.text, ctx))
    }

    fn log_parse(
        &self,
        writer: &mut RunWriter,
        parser: &str,
        outcome: &str,
        detail: serde_json::Value,
    ) -> Result<(), StoreError> {
        writer.append(EventPayload::ParseResult {
            parser: parser.to_string(),
            outcome: outcome.to_string(),
            detail,
        })?;
        Ok(())
    }

    /// Identification with one format-reminder reprompt.
    fn identify_with_reprompt(
        &self,
        writer: &mut RunWriter,
        state: &RunState,
        label: &str,
        ctx: RenderContext,
        render: &dyn Fn(&RenderContext) -> Result<RenderedPrompt, ForgeError>,
    ) -> Result<IdentificationOutcome, StepFailure> {
        let (reply, ctx) = match self.call_model(writer, state, label, ctx, render, None) {
            Ok(v) => v,
            Err((f, _)) => return Err(f),
        };
        match parse_identification(&reply) {
            Ok(outcome) => {
                self.log_parse(
                    writer,
                    "identification",
                    match &outcome {
                        IdentificationOutcome::Clean(_) => "clean",
                        IdentificationOutcome::Vulnerable { .. } => "vulnerable",
                    },
                    identification_detail(&outcome),
                )?;
                Ok(outcome)
            }
            Err(ParseError::Unparseable) => {
                self.log_parse(
                    writer,
                    "identification",
                    "unparseable",
                    serde_json::json!({ "reply_chars": reply.len() }),
                )?;
                let label = format!("{label}+reminder");
                let (reply, _) = match self.call_model(
                    writer,
                    state,
                    &label,
                    ctx,
                    render,
                    Some(IDENTIFY_REMINDER),
                ) {
                    Ok(v) => v,
                    Err((f, _)) => return Err(f),
                };
                match parse_identification(&reply) {
                    Ok(outcome) => {
                        self.log_parse(
                            writer,
                            "identification",
                            match &outcome {
                                IdentificationOutcome::Clean(_) => "clean",
                                IdentificationOutcome::Vulnerable { .. } => "vulnerable",
                            },
                            identification_detail(&outcome),
                        )?;
                        Ok(outcome)
                    }
                    Err(e) => {
                        self.log_parse(
                            writer,
                            "identification",
                            "unparseable",
                            serde_json::json!({ "reply_chars": reply.len() }),
                        )?;
                        Err(provider_failure(format!(
                            "unparseable reply after format reminder: {e}"
                        )))
                    }
                }
            }
            Err(e) => Err(provider_failure(e.to_string())),
        }
    }

    /// Fix-round call with one format-reminder reprompt on a missing code
    /// block.
    fn fix_with_reprompt(
        &self,
        writer: &mut RunWriter,
        state: &RunState,
        label: &str,
        ctx: RenderContext,
        render: &dyn Fn(&RenderContext) -> Result<RenderedPrompt, ForgeError>,
    ) -> Result<crate::response_parser::FixReport, StepFailure> {
        let language = self.config.target_language;
        let fallback = state.score.current;
        let (reply, ctx) = match self.call_model(writer, state, label, ctx, render, None) {
            Ok(v) => v,
            Err((f, _)) => return Err(f),
        };
        match parse_fix(&reply, language, fallback) {
            Ok(fix) => {
                self.log_parse(writer, "fix", "fix", fix_detail(&fix))?;
                Ok(fix)
            }
            Err(ParseError::NoCodeBlock) => {
                self.log_parse(
                    writer,
                    "fix",
                    "no-code-block",
                    serde_json::json!({ "reply_chars": reply.len() }),
                )?;
                let label = format!("{label}+reminder");
                let (reply, _) =
                    match self.call_model(writer, state, &label, ctx, render, Some(FIX_REMINDER)) {
                        Ok(v) => v,
                        Err((f, _)) => return Err(f),
                    };
                match parse_fix(&reply, language, fallback) {
                    Ok(fix) => {
                        self.log_parse(writer, "fix", "fix", fix_detail(&fix))?;
                        Ok(fix)
                    }
                    Err(e) => {
                        self.log_parse(
                            writer,
                            "fix",
                            "no-code-block",
                            serde_json::json!({ "reply_chars": reply.len() }),
                        )?;
                        Err(provider_failure(format!(
                            "no code block after format reminder: {e}"
                        )))
                    }
                }
            }
            Err(e) => Err(provider_failure(e.to_string())),
        }
    }

    fn settle(
        &self,
        state: &mut RunState,
        writer: &mut RunWriter,
        found: &[Cwe],
    ) -> Result<(), StoreError> {
        if let Some(pending) = state.pending_settlement.take() {
            let events =
                state
                    .score
                    .settle_round(state.iteration, &pending.claimed, &pending.before, found);
            writer.append(EventPayload::ScoreEvent {
                iteration: state.iteration,
                events,
                current_after: state.score.current,
            })?;
        }
        Ok(())
    }

    fn snapshot(&self, writer: &mut RunWriter, code: &CodeArtifact) -> Result<(), StoreError> {
        writer.append(EventPayload::CodeSnapshot {
            version: code.version,
            language: code.language,
            lineage: code.lineage.clone(),
            source: code.source.clone(),
            source_digest: code.digest(),
        })?;
        Ok(())
    }
}

type StepResult = Result<RunState, (RunState, StepFailure)>;

impl<'a> Orchestrator<'a> {
    fn step_generate(&self, mut state: RunState, writer: &mut RunWriter) -> StepResult {
        let prompt = state.nl_prompt.clone().unwrap_or_default();
        let mut ctx = self.base_ctx(&state);
        ctx.nl_prompt = Some(prompt.clone());
        ctx.language = Some(self.config.target_language);
        let forge = self.forge;
        let render = move |c: &RenderContext| forge.render(TemplateId::GenWrapperP1, c);
        let (reply, _) = match self.call_model(writer, &state, "gen_wrapper_p1", ctx, &render, None)
        {
            Ok(v) => v,
            Err((f, _)) => return Err((state, f)),
        };
        let code = match extract_code(&reply, self.config.target_language) {
            Ok(code) => {
                if let Err(e) = self.log_parse(
                    writer,
                    "extract",
                    "code",
                    serde_json::json!({ "lineage": code.lineage, "bytes": code.source.len() }),
                ) {
                    return Err((state, e.into()));
                }
                code
            }
            Err(_) => {
                if let Err(e) = self.log_parse(
                    writer,
                    "extract",
                    "no-code-block",
                    serde_json::json!({ "reply_chars": reply.len() }),
                ) {
                    return Err((state, e.into()));
                }
                // One format-reminder retry.
                let mut ctx = self.base_ctx(&state);
                ctx.nl_prompt = Some(prompt);
                ctx.language = Some(self.config.target_language);
                let (reply, _) = match self.call_model(
                    writer,
                    &state,
                    "gen_wrapper_p1+reminder",
                    ctx,
                    &render,
                    Some(FIX_REMINDER),
                ) {
                    Ok(v) => v,
                    Err((f, _)) => return Err((state, f)),
                };
                match extract_code(&reply, self.config.target_language) {
                    Ok(code) => code,
                    Err(e) => {
                        return Err((
                            state,
                            provider_failure(format!("no code block after format reminder: {e}")),
                        ))
                    }
                }
            }
        };
        let mut artifact = code;
        artifact.lineage = format!("s1-generate:{}", artifact.lineage);
        if let Err(e) = self.snapshot(writer, &artifact) {
            return Err((state, e.into()));
        }
        state.current_code = Some(artifact);
        state.stage = Stage::S2Identify;
        Ok(state)
    }

    fn step_identify(&self, mut state: RunState, writer: &mut RunWriter) -> StepResult {
        let first_visit = state.identify_visits == 0;
        state.identify_visits += 1;
        let ctx = self.base_ctx(&state);
        let forge = self.forge;
        let ep = self.config.ep_enabled;
        let (label, render): (&str, RenderFn<'_>) = if first_visit {
            (
                "identify_p2",
                Box::new(move |c| forge.render(TemplateId::IdentifyP2, c)),
            )
        } else {
            (
                "identify_prime_p2p",
                Box::new(move |c| {
                    forge.render_variant(
                        TemplateVariant {
                            id: TemplateId::IdentifyPrimeP2p,
                            ep,
                        },
                        c,
                    )
                }),
            )
        };
        let outcome = match self.identify_with_reprompt(writer, &state, label, ctx, &*render) {
            Ok(o) => o,
            Err(f) => return Err((state, f)),
        };
        match outcome {
            IdentificationOutcome::Clean(_) => {
                if state.initially_vulnerable.is_none() {
                    state.initially_vulnerable = Some(false);
                }
                if let Err(e) = self.settle(&mut state, writer, &[]) {
                    return Err((state, e.into()));
                }
                if self.config.crosscheck_enabled {
                    state.stage = Stage::S3Crosscheck;
                } else {
                    state.stage = Stage::Done;
                    state.termination = Some(TerminationReason::new(
                        TerminationKind::SecureConfirmed,
                        "model verdict clean; cross-check disabled",
                    ));
                }
            }
            IdentificationOutcome::Vulnerable { reports, .. } => {
                if state.initially_vulnerable.is_none() {
                    state.initially_vulnerable = Some(true);
                }
                let found: Vec<Cwe> = reports.iter().map(|r| r.cwe).collect();
                if let Err(e) = self.settle(&mut state, writer, &found) {
                    return Err((state, e.into()));
                }
                if state.iteration >= self.config.max_iterations {
                    state.stage = Stage::Done;
                    state.termination = Some(TerminationReason::new(
                        TerminationKind::BudgetExhausted,
                        format!(
                            "iteration budget of {} exhausted at escalation level {}",
                            self.config.max_iterations, state.escalation_level
                        ),
                    ));
                } else {
                    state.pending_vulns = reports;
                    state.stage = Stage::S2Fix;
                }
            }
        }
        Ok(state)
    }

    fn step_fix(
        &self,
        mut state: RunState,
        writer: &mut RunWriter,
        trace: &mut RunTrace,
    ) -> StepResult {
        let mut ctx = self.base_ctx(&state);
        ctx.vuln_reports = state.pending_vulns.clone();
        if state.adaptive_armed {
            let cwes: Vec<Cwe> = state.pending_vulns.iter().map(|r| r.cwe).collect();
            ctx = inject_adaptive(ctx, self.adaptive, &cwes);
        }
        let forge = self.forge;
        let strategy = self.config.strategy;
        let ep = self.config.ep_enabled;
        let render = move |c: &RenderContext| forge.render_fix(strategy, c, ep);
        let fix = match self.fix_with_reprompt(writer, &state, "fix_p3", ctx, &render) {
            Ok(f) => f,
            Err(f) => return Err((state, f)),
        };
        let before: Vec<Cwe> = state.pending_vulns.iter().map(|r| r.cwe).collect();
        state.iteration += 1;
        let claimed: Vec<Cwe> = fix.fixed_list.iter().map(|(c, _)| *c).collect();
        let current = state.current_code.as_ref().expect("code exists by S2");
        let next_code = current.evolve(
            fix.fixed_code.source.clone(),
            format!(
                "s2-fix-round-{}:{}",
                state.iteration, fix.fixed_code.lineage
            ),
        );
        if let Err(e) = self.snapshot(writer, &next_code) {
            return Err((state, e.into()));
        }
        state.current_code = Some(next_code);
        extend_history(
            &mut state.fixed_history,
            &fix.fixed_list,
            &state.pending_vulns,
        );
        state.pending_settlement = Some(PendingSettlement {
            claimed: claimed.clone(),
            before,
        });
        trace.iterations.push(IterationRecord {
            index: state.iteration,
            kind: IterationKind::S2Fix,
            claimed,
            escalation_level: state.escalation_level,
        });
        state.pending_vulns.clear();
        state.stage = Stage::S2Identify;
        Ok(state)
    }

    fn step_crosscheck(&self, mut state: RunState, writer: &mut RunWriter) -> StepResult {
        let code = state.current_code.clone().expect("code exists by S3");
        match self.analyzer.scan(&code) {
            Ok(report) => {
                state.consecutive_build_failures = 0;
                let (kept, dropped) =
                    cap_by_severity(report.findings.clone(), self.config.findings_cap);
                if let Err(e) = writer.append(EventPayload::AnalyzerScan {
                    outcome: Ok(report.clone()),
                    dropped_findings: dropped,
                }) {
                    return Err((state, e.into()));
                }
                if kept.is_empty() {
                    state.stage = Stage::Done;
                    state.termination = Some(TerminationReason::new(
                        TerminationKind::SecureConfirmed,
                        "analyzer report empty",
                    ));
                } else if state.iteration >= self.config.max_iterations {
                    state.stage = Stage::Done;
                    state.termination = Some(TerminationReason::new(
                        TerminationKind::BudgetExhausted,
                        format!(
                            "iteration budget of {} exhausted at escalation level {}",
                            self.config.max_iterations, state.escalation_level
                        ),
                    ));
                } else {
                    state.pending_findings = kept;
                    state.header_repair = false;
                    state.stage = Stage::S3Refix;
                }
            }
            Err(ScanError::BuildFailed { compiler_log }) => {
                state.consecutive_build_failures += 1;
                if let Err(e) = writer.append(EventPayload::AnalyzerScan {
                    outcome: Err(ScanError::BuildFailed {
                        compiler_log: compiler_log.clone(),
                    }),
                    dropped_findings: 0,
                }) {
                    return Err((state, e.into()));
                }
                if state.consecutive_build_failures > 2 {
                    state.stage = Stage::Done;
                    state.termination = Some(TerminationReason::new(
                        TerminationKind::BuildFailureFinal,
                        "code failed to compile after two header-repair rounds",
                    ));
                } else if state.iteration >= self.config.max_iterations {
                    state.stage = Stage::Done;
                    state.termination = Some(TerminationReason::new(
                        TerminationKind::BudgetExhausted,
                        "no budget left for a header-repair round",
                    ));
                } else {
                    state.header_repair = true;
                    state.compiler_log = Some(compiler_log);
                    state.stage = Stage::S3Refix;
                }
            }
            Err(e) => {
                if let Err(store_err) = writer.append(EventPayload::AnalyzerScan {
                    outcome: Err(e.clone()),
                    dropped_findings: 0,
                }) {
                    return Err((state, store_err.into()));
                }
                // A failed analyzer can never imply cleanliness.
                return Err((
                    state,
                    provider_failure(format!("analyzer did not complete: {e}")),
                ));
            }
        }
        Ok(state)
    }

    fn step_refix(
        &self,
        mut state: RunState,
        writer: &mut RunWriter,
        trace: &mut RunTrace,
    ) -> StepResult {
        let header_repair = state.header_repair;
        let mut ctx = self.base_ctx(&state);
        let forge = self.forge;
        let ep = self.config.ep_enabled;
        let (label, render): (&str, RenderFn<'_>) = if header_repair {
            ctx.compiler_log = state.compiler_log.clone();
            (
                "header_repair",
                Box::new(move |c| forge.render(TemplateId::HeaderRepair, c)),
            )
        } else {
            ctx.analyzer_findings = state.pending_findings.clone();
            if state.adaptive_armed {
                let cwes: Vec<Cwe> = state
                    .pending_findings
                    .iter()
                    .flat_map(|f| f.cwes.iter().copied())
                    .collect();
                ctx = inject_adaptive(ctx, self.adaptive, &cwes);
            }
            (
                "fix_prime_p3p",
                Box::new(move |c| {
                    let variant = if ep {
                        TemplateVariant {
                            id: TemplateId::FixPrimeP3p,
                            ep: true,
                        }
                    } else {
                        strip_ep(TemplateId::FixPrimeP3p).expect("fix template")
                    };
                    forge.render_variant(variant, c)
                }),
            )
        };
        let fix = match self.fix_with_reprompt(writer, &state, label, ctx, &*render) {
            Ok(f) => f,
            Err(f) => return Err((state, f)),
        };
        let before: Vec<Cwe> = state
            .pending_findings
            .iter()
            .flat_map(|f| f.cwes.iter().copied())
            .collect();
        state.iteration += 1;
        let claimed: Vec<Cwe> = fix.fixed_list.iter().map(|(c, _)| *c).collect();
        let current = state.current_code.as_ref().expect("code exists by S3");
        let lineage_tag = if header_repair {
            "header-repair-round"
        } else {
            "s3-refix-round"
        };
        let next_code = current.evolve(
            fix.fixed_code.source.clone(),
            format!(
                "{}-{}:{}",
                lineage_tag, state.iteration, fix.fixed_code.lineage
            ),
        );
        if let Err(e) = self.snapshot(writer, &next_code) {
            return Err((state, e.into()));
        }
        state.current_code = Some(next_code);
        if fix.fixed_list.is_empty() && !header_repair {
            // Keep the recheck context informative even when the model did
            // not enumerate its fixes.
            for finding in &state.pending_findings {
                if let Some(&cwe) = finding.cwes.first() {
                    state
                        .fixed_history
                        .push((cwe, format!("fix attempted for {}", finding.rule_id)));
                }
            }
        } else {
            extend_history(&mut state.fixed_history, &fix.fixed_list, &[]);
        }
        state.pending_settlement = Some(PendingSettlement {
            claimed: claimed.clone(),
            before,
        });
        trace.iterations.push(IterationRecord {
            index: state.iteration,
            kind: if header_repair {
                IterationKind::HeaderRepair
            } else {
                IterationKind::S3Refix
            },
            claimed,
            escalation_level: state.escalation_level,
        });
        state.pending_findings.clear();
        state.header_repair = false;
        state.compiler_log = None;
        state.stage = Stage::S3Recheck;
        Ok(state)
    }

    fn step_recheck(&self, mut state: RunState, writer: &mut RunWriter) -> StepResult {
        let mut ctx = self.base_ctx(&state);
        ctx.fixed_history = state.fixed_history.clone();
        let forge = self.forge;
        let ep = self.config.ep_enabled;
        // A refix round that could not attribute any CWE leaves the history
        // empty; the recheck then falls back to the plain identification
        // prompt, which needs no history.
        let use_p4 = !state.fixed_history.is_empty();
        let render: RenderFn<'_> = if use_p4 {
            Box::new(move |c| forge.render(TemplateId::RecheckP4, c))
        } else {
            Box::new(move |c| {
                forge.render_variant(
                    TemplateVariant {
                        id: TemplateId::IdentifyPrimeP2p,
                        ep,
                    },
                    c,
                )
            })
        };
        let label = if use_p4 {
            "recheck_p4"
        } else {
            "identify_prime_p2p"
        };
        let outcome = match self.identify_with_reprompt(writer, &state, label, ctx, &*render) {
            Ok(o) => o,
            Err(f) => return Err((state, f)),
        };
        match outcome {
            IdentificationOutcome::Clean(_) => {
                if let Err(e) = self.settle(&mut state, writer, &[]) {
                    return Err((state, e.into()));
                }
                state.stage = Stage::S3Crosscheck;
            }
            IdentificationOutcome::Vulnerable { reports, .. } => {
                let found: Vec<Cwe> = reports.iter().map(|r| r.cwe).collect();
                if let Err(e) = self.settle(&mut state, writer, &found) {
                    return Err((state, e.into()));
                }
                if state.iteration >= self.config.max_iterations {
                    state.stage = Stage::Done;
                    state.termination = Some(TerminationReason::new(
                        TerminationKind::BudgetExhausted,
                        format!(
                            "iteration budget of {} exhausted at escalation level {}",
                            self.config.max_iterations, state.escalation_level
                        ),
                    ));
                } else {
                    state.pending_vulns = reports;
                    state.stage = Stage::S2Fix;
                }
            }
        }
        Ok(state)
    }
}

fn extend_history(
    history: &mut Vec<(Cwe, String)>,
    fixed_list: &[(Cwe, String)],
    pending: &[VulnReport],
) {
    if fixed_list.is_empty() {
        for report in pending {
            history.push((report.cwe, format!("fix attempted: {}", report.vuln_type)));
        }
    } else {
        history.extend(fixed_list.iter().cloned());
    }
}

fn identification_detail(outcome: &IdentificationOutcome) -> serde_json::Value {
    match outcome {
        IdentificationOutcome::Clean(v) => serde_json::json!({ "reason": v.reason }),
        IdentificationOutcome::Vulnerable {
            reports,
            reported_score,
        } => serde_json::json!({
            "count": reports.len(),
            "cwes": reports.iter().map(|r| r.cwe.to_string()).collect::<Vec<_>>(),
            "spans": reports.iter().map(|r| r.span).collect::<Vec<_>>(),
            "reported_score": reported_score,
        }),
    }
}

fn fix_detail(fix: &crate::response_parser::FixReport) -> serde_json::Value {
    serde_json::json!({
        "claimed": fix.fixed_list.iter().map(|(c, _)| c.to_string()).collect::<Vec<_>>(),
        "original_score": fix.original_score,
        "updated_score": fix.updated_score,
        "scores_inferred": fix.scores_inferred,
        "code_bytes": fix.fixed_code.source.len(),
    })
}
