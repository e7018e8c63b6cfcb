//! Prompt template rendering.
//!
//! Templates are plain text files with `{name}` placeholders, shipped with
//! the crate and overridable from a directory, so the prompt wording can be
//! audited and updated without recompiling. Reward/score sections are bracketed
//! by `<<EP>>` / `<</EP>>` marker lines: the canonical render keeps the text
//! between them (dropping the marker lines), the stripped variant drops the
//! whole section. Rendering is deterministic: the same context always yields
//! identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::crosschecker::AnalyzerFinding;
use crate::response_parser::VulnReport;
use crate::types::{CodeArtifact, Cwe, Language};

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("template {template} requires context field `{field}`")]
    MissingContextField {
        template: TemplateId,
        field: &'static str,
    },
    #[error("unknown template key `{0}`")]
    UnknownTemplate(String),
    #[error("{0} is not an encouragement-prompt template")]
    NotAnEpTemplate(TemplateId),
    #[error("failed to load template directory: {0}")]
    Load(String),
}

/// The prompt templates the orchestrator renders; one per transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateId {
    GenWrapperP1,
    IdentifyP2,
    IdentifyPrimeP2p,
    FixP3,
    FixPrimeP3p,
    RecheckP4,
    HeaderRepair,
}

impl TemplateId {
    pub const ALL: [TemplateId; 7] = [
        TemplateId::GenWrapperP1,
        TemplateId::IdentifyP2,
        TemplateId::IdentifyPrimeP2p,
        TemplateId::FixP3,
        TemplateId::FixPrimeP3p,
        TemplateId::RecheckP4,
        TemplateId::HeaderRepair,
    ];

    fn key(self) -> &'static str {
        match self {
            TemplateId::GenWrapperP1 => "gen_wrapper_p1",
            TemplateId::IdentifyP2 => "identify_p2",
            TemplateId::IdentifyPrimeP2p => "identify_prime_p2p",
            TemplateId::FixP3 => "fix_p3",
            TemplateId::FixPrimeP3p => "fix_prime_p3p",
            TemplateId::RecheckP4 => "recheck_p4",
            TemplateId::HeaderRepair => "header_repair",
        }
    }

    fn is_ep_template(self) -> bool {
        matches!(self, TemplateId::FixP3 | TemplateId::FixPrimeP3p)
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// A template together with the encouragement-section switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemplateVariant {
    pub id: TemplateId,
    pub ep: bool,
}

/// Return the variant of a fix template whose render omits the reward block
/// and score interpolation but keeps the fix instructions and output format.
pub fn strip_ep(template: TemplateId) -> Result<TemplateVariant, ForgeError> {
    if template.is_ep_template() {
        Ok(TemplateVariant {
            id: template,
            ep: false,
        })
    } else {
        Err(ForgeError::NotAnEpTemplate(template))
    }
}

/// Which fix-prompt family a run uses. `Ep` is the canonical one; the others
/// are thin comparison variants whose exact wording is not canonical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixStrategy {
    #[default]
    Ep,
    Cot,
    Coc,
    Plain,
}

impl FixStrategy {
    fn fix_key(self) -> &'static str {
        match self {
            FixStrategy::Ep => "fix_p3",
            FixStrategy::Cot => "fix_cot",
            FixStrategy::Coc => "fix_coc",
            FixStrategy::Plain => "fix_plain",
        }
    }

    pub fn parse(text: &str) -> Option<FixStrategy> {
        match text.trim().to_ascii_lowercase().as_str() {
            "ep" => Some(FixStrategy::Ep),
            "cot" => Some(FixStrategy::Cot),
            "coc" => Some(FixStrategy::Coc),
            "plain" => Some(FixStrategy::Plain),
            _ => None,
        }
    }
}

/// A vulnerable/fixed snippet pair for one CWE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub cwe: Cwe,
    pub vulnerable_snippet: String,
    pub fixed_snippet: String,
    pub note: String,
}

/// Library of adaptive example pairs, keyed by CWE.
#[derive(Debug, Clone, Default)]
pub struct AdaptiveStore {
    pairs: BTreeMap<Cwe, ExamplePair>,
}

impl AdaptiveStore {
    /// The pairs shipped with the crate (CWE-119 bounds check, CWE-190
    /// overflow guard).
    pub fn builtin() -> Self {
        let mut store = AdaptiveStore::default();
        store.insert(ExamplePair {
            cwe: Cwe(119),
            vulnerable_snippet: include_str!("../assets/adaptive/cwe-119.vulnerable.txt")
                .trim_end()
                .to_string(),
            fixed_snippet: include_str!("../assets/adaptive/cwe-119.fixed.txt")
                .trim_end()
                .to_string(),
            note: include_str!("../assets/adaptive/cwe-119.note.txt")
                .trim_end()
                .to_string(),
        });
        store.insert(ExamplePair {
            cwe: Cwe(190),
            vulnerable_snippet: include_str!("../assets/adaptive/cwe-190.vulnerable.txt")
                .trim_end()
                .to_string(),
            fixed_snippet: include_str!("../assets/adaptive/cwe-190.fixed.txt")
                .trim_end()
                .to_string(),
            note: include_str!("../assets/adaptive/cwe-190.note.txt")
                .trim_end()
                .to_string(),
        });
        store
    }

    /// Load pairs from a directory of `<cwe>.vulnerable.txt` /
    /// `<cwe>.fixed.txt` (and optional `<cwe>.note.txt`) files.
    pub fn from_dir(dir: &Path) -> Result<Self, ForgeError> {
        let mut store = AdaptiveStore::default();
        let entries = fs::read_dir(dir).map_err(|e| ForgeError::Load(e.to_string()))?;
        for entry in entries {
            let entry = entry.map_err(|e| ForgeError::Load(e.to_string()))?;
            let name = entry.file_name().to_string_lossy().to_string();
            let Some(stem) = name.strip_suffix(".vulnerable.txt") else {
                continue;
            };
            let Some(cwe) = Cwe::parse(stem) else {
                continue;
            };
            let read = |suffix: &str| -> Result<String, ForgeError> {
                let path = dir.join(format!("{stem}{suffix}"));
                fs::read_to_string(&path)
                    .map(|s| s.trim_end().to_string())
                    .map_err(|e| ForgeError::Load(format!("{}: {e}", path.display())))
            };
            let vulnerable_snippet = read(".vulnerable.txt")?;
            let fixed_snippet = read(".fixed.txt")?;
            let note = read(".note.txt").unwrap_or_default();
            if vulnerable_snippet.is_empty() || fixed_snippet.is_empty() {
                return Err(ForgeError::Load(format!("empty snippet pair for {stem}")));
            }
            store.insert(ExamplePair {
                cwe,
                vulnerable_snippet,
                fixed_snippet,
                note,
            });
        }
        Ok(store)
    }

    pub fn insert(&mut self, pair: ExamplePair) {
        self.pairs.insert(pair.cwe, pair);
    }

    pub fn get(&self, cwe: Cwe) -> Option<&ExamplePair> {
        self.pairs.get(&cwe)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Extend a render context with at most one example pair per requested CWE.
/// CWEs without a stored example are skipped (and logged), never an error.
pub fn inject_adaptive(
    mut ctx: RenderContext,
    store: &AdaptiveStore,
    cwes: &[Cwe],
) -> RenderContext {
    for &cwe in cwes {
        if ctx.adaptive_examples.iter().any(|p| p.cwe == cwe) {
            continue;
        }
        match store.get(cwe) {
            Some(pair) => ctx.adaptive_examples.push(pair.clone()),
            None => debug!(%cwe, "no adaptive example stored; skipping"),
        }
    }
    ctx
}

/// Everything a template render can draw on.
#[derive(Debug, Clone, Default)]
pub struct RenderContext {
    pub nl_prompt: Option<String>,
    pub code: Option<CodeArtifact>,
    /// Target language when no code exists yet (the generation wrapper).
    pub language: Option<Language>,
    pub vuln_reports: Vec<VulnReport>,
    pub score_current: i64,
    pub analyzer_findings: Vec<AnalyzerFinding>,
    pub fixed_history: Vec<(Cwe, String)>,
    pub adaptive_examples: Vec<ExamplePair>,
    /// The MITRE Top-25 list text interpolated into identification prompts.
    pub cwe_catalog: String,
    pub compiler_log: Option<String>,
}

impl RenderContext {
    pub fn for_code(code: CodeArtifact) -> Self {
        RenderContext {
            language: Some(code.language),
            code: Some(code),
            ..Default::default()
        }
    }

    fn language(&self) -> Option<Language> {
        self.code.as_ref().map(|c| c.language).or(self.language)
    }
}

/// A rendered prompt ready for the model gateway.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    /// System text. Empty for the canonical templates: their role line is
    /// part of the prompt body, mirroring single-turn usage.
    pub system: String,
    pub user: String,
    /// Character-count/4 heuristic, used for pre-flight token budgeting.
    pub estimated_tokens: usize,
}

impl RenderedPrompt {
    fn new(system: String, user: String) -> Self {
        let estimated_tokens = (system.len() + user.len()).div_ceil(4);
        RenderedPrompt {
            system,
            user,
            estimated_tokens,
        }
    }
}

const EP_OPEN: &str = "<<EP>>";
const EP_CLOSE: &str = "<</EP>>";

/// Loads and renders the prompt templates.
#[derive(Debug, Clone)]
pub struct PromptForge {
    templates: BTreeMap<String, String>,
}

impl PromptForge {
    /// The templates embedded in the crate.
    pub fn builtin() -> Self {
        let mut templates = BTreeMap::new();
        templates.insert(
            "gen_wrapper_p1".to_string(),
            include_str!("../assets/templates/gen_wrapper_p1.txt").to_string(),
        );
        templates.insert(
            "identify_p2".to_string(),
            include_str!("../assets/templates/identify_p2.txt").to_string(),
        );
        templates.insert(
            "identify_prime_p2p".to_string(),
            include_str!("../assets/templates/identify_prime_p2p.txt").to_string(),
        );
        templates.insert(
            "fix_p3".to_string(),
            include_str!("../assets/templates/fix_p3.txt").to_string(),
        );
        templates.insert(
            "fix_prime_p3p".to_string(),
            include_str!("../assets/templates/fix_prime_p3p.txt").to_string(),
        );
        templates.insert(
            "recheck_p4".to_string(),
            include_str!("../assets/templates/recheck_p4.txt").to_string(),
        );
        templates.insert(
            "header_repair".to_string(),
            include_str!("../assets/templates/header_repair.txt").to_string(),
        );
        templates.insert(
            "fix_cot".to_string(),
            include_str!("../assets/templates/fix_cot.txt").to_string(),
        );
        templates.insert(
            "fix_coc".to_string(),
            include_str!("../assets/templates/fix_coc.txt").to_string(),
        );
        templates.insert(
            "fix_plain".to_string(),
            include_str!("../assets/templates/fix_plain.txt").to_string(),
        );
        PromptForge { templates }
    }

    /// Load templates from a directory of `<key>.txt` files, falling back to
    /// the embedded copy for any file not present.
    pub fn from_dir(dir: &Path) -> Result<Self, ForgeError> {
        let mut forge = PromptForge::builtin();
        let keys: Vec<String> = forge.templates.keys().cloned().collect();
        for key in keys {
            let path = dir.join(format!("{key}.txt"));
            if path.exists() {
                let text =
                    fs::read_to_string(&path).map_err(|e| ForgeError::Load(e.to_string()))?;
                forge.templates.insert(key, text);
            }
        }
        Ok(forge)
    }

    /// The MITRE Top-25 (2023) catalog text shipped with the crate.
    pub fn builtin_top25_catalog() -> &'static str {
        include_str!("../assets/mitre_top25_2023.txt")
    }

    /// Render a template with its encouragement sections kept.
    pub fn render(
        &self,
        template: TemplateId,
        ctx: &RenderContext,
    ) -> Result<RenderedPrompt, ForgeError> {
        self.render_variant(
            TemplateVariant {
                id: template,
                ep: true,
            },
            ctx,
        )
    }

    /// Render a template variant (encouragement sections kept or stripped).
    pub fn render_variant(
        &self,
        variant: TemplateVariant,
        ctx: &RenderContext,
    ) -> Result<RenderedPrompt, ForgeError> {
        validate(variant.id, ctx)?;
        let raw = self
            .templates
            .get(variant.id.key())
            .ok_or_else(|| ForgeError::UnknownTemplate(variant.id.key().to_string()))?;
        let text = apply_ep_sections(raw, variant.ep);
        let user = substitute(&text, variant.id, ctx)?;
        Ok(RenderedPrompt::new(String::new(), user))
    }

    /// Render the fix prompt for the selected strategy. Non-EP strategies
    /// never contain reward sections regardless of `ep`.
    pub fn render_fix(
        &self,
        strategy: FixStrategy,
        ctx: &RenderContext,
        ep: bool,
    ) -> Result<RenderedPrompt, ForgeError> {
        if strategy == FixStrategy::Ep {
            return self.render_variant(
                TemplateVariant {
                    id: TemplateId::FixP3,
                    ep,
                },
                ctx,
            );
        }
        validate(TemplateId::FixP3, ctx)?;
        let raw = self
            .templates
            .get(strategy.fix_key())
            .ok_or_else(|| ForgeError::UnknownTemplate(strategy.fix_key().to_string()))?;
        let text = apply_ep_sections(raw, false);
        let user = substitute(&text, TemplateId::FixP3, ctx)?;
        Ok(RenderedPrompt::new(String::new(), user))
    }
}

fn validate(template: TemplateId, ctx: &RenderContext) -> Result<(), ForgeError> {
    let missing = |field: &'static str| ForgeError::MissingContextField { template, field };
    let need_code = |ctx: &RenderContext| -> Result<(), ForgeError> {
        match &ctx.code {
            Some(c) if !c.source.is_empty() => Ok(()),
            _ => Err(missing("code")),
        }
    };
    match template {
        TemplateId::GenWrapperP1 => {
            if ctx.nl_prompt.as_deref().is_none_or(str::is_empty) {
                return Err(missing("nl_prompt"));
            }
            if ctx.language().is_none() {
                return Err(missing("language"));
            }
        }
        TemplateId::IdentifyP2 => need_code(ctx)?,
        TemplateId::IdentifyPrimeP2p => {
            need_code(ctx)?;
            if ctx.cwe_catalog.trim().is_empty() {
                return Err(missing("cwe_catalog"));
            }
        }
        TemplateId::FixP3 => {
            need_code(ctx)?;
            if ctx.vuln_reports.is_empty() {
                return Err(missing("vuln_reports"));
            }
        }
        TemplateId::FixPrimeP3p => {
            need_code(ctx)?;
            if ctx.analyzer_findings.is_empty() {
                return Err(missing("analyzer_findings"));
            }
        }
        TemplateId::RecheckP4 => {
            need_code(ctx)?;
            if ctx.fixed_history.is_empty() {
                return Err(missing("fixed_history"));
            }
        }
        TemplateId::HeaderRepair => {
            need_code(ctx)?;
            if ctx.compiler_log.as_deref().is_none_or(str::is_empty) {
                return Err(missing("compiler_log"));
            }
        }
    }
    Ok(())
}

fn apply_ep_sections(raw: &str, keep: bool) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut in_ep = false;
    for line in raw.split_inclusive('\n') {
        let content = line.trim_end_matches(['\n', '\r']);
        if content.trim() == EP_OPEN {
            in_ep = true;
            continue;
        }
        if content.trim() == EP_CLOSE {
            in_ep = false;
            continue;
        }
        if in_ep && !keep {
            continue;
        }
        out.push_str(line);
    }
    out
}

/// Single-pass `{placeholder}` substitution. Values are inserted verbatim and
/// never rescanned, so code containing brace sequences cannot corrupt the
/// render.
fn substitute(text: &str, template: TemplateId, ctx: &RenderContext) -> Result<String, ForgeError> {
    let language = ctx.language();
    let mut out = String::with_capacity(text.len() * 2);
    let bytes = text.as_bytes();
    let mut pos = 0;
    while let Some(open) = text[pos..].find('{') {
        let abs = pos + open;
        out.push_str(&text[pos..abs]);
        let close = match text[abs..].find('}') {
            Some(c) => abs + c,
            None => {
                out.push_str(&text[abs..]);
                return Ok(out);
            }
        };
        let name = &text[abs + 1..close];
        if !name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b == b'_' || b.is_ascii_digit())
            || name.is_empty()
        {
            // Not a placeholder (e.g. a brace inside embedded text).
            out.push(bytes[abs] as char);
            pos = abs + 1;
            continue;
        }
        let value = match name {
            "nl_prompt" => ctx
                .nl_prompt
                .clone()
                .ok_or(ForgeError::MissingContextField {
                    template,
                    field: "nl_prompt",
                })?,
            "code" => ctx.code.as_ref().map(|c| c.source.clone()).ok_or(
                ForgeError::MissingContextField {
                    template,
                    field: "code",
                },
            )?,
            "language" => language.map(|l| l.display_name().to_string()).ok_or(
                ForgeError::MissingContextField {
                    template,
                    field: "language",
                },
            )?,
            "fence_tag" => language.map(|l| l.fence_tag().to_string()).ok_or(
                ForgeError::MissingContextField {
                    template,
                    field: "language",
                },
            )?,
            "score" => ctx.score_current.to_string(),
            "vuln_reports" => serialize_vuln_reports(&ctx.vuln_reports),
            "analyzer_findings" => serialize_findings(&ctx.analyzer_findings),
            "fixed_history" => serialize_fixed_history(&ctx.fixed_history),
            "mitre_top25_vulnerabilities" => ctx.cwe_catalog.trim_end().to_string(),
            "adaptive_examples" => serialize_adaptive(&ctx.adaptive_examples),
            "compiler_log" => ctx
                .compiler_log
                .clone()
                .map(|l| l.trim_end().to_string())
                .ok_or(ForgeError::MissingContextField {
                    template,
                    field: "compiler_log",
                })?,
            _ => return Err(ForgeError::UnknownTemplate(format!("placeholder {name}"))),
        };
        out.push_str(&value);
        pos = close + 1;
    }
    out.push_str(&text[pos..]);
    Ok(out)
}

/// Findings serialized in the pipe-delimited order the identification
/// prompts specify: type | CWE | justification | response, one block per
/// finding.
fn serialize_vuln_reports(reports: &[VulnReport]) -> String {
    let mut blocks = Vec::with_capacity(reports.len());
    for (i, r) in reports.iter().enumerate() {
        let mut block = String::new();
        let type_text = if r.vuln_type.is_empty() {
            String::new()
        } else {
            format!(": {}", r.vuln_type)
        };
        block.push_str(&format!("{}. {}{}", i + 1, r.cwe, type_text));
        if !r.address.is_empty() {
            block.push_str(&format!("\nAddress: {}", r.address));
        }
        if !r.justification.is_empty() {
            block.push_str(&format!("\nJustification: {}", r.justification));
        }
        if !r.response.is_empty() {
            block.push_str(&format!("\nResponse: {}", r.response));
        }
        blocks.push(block);
    }
    blocks.join("\n")
}

fn serialize_findings(findings: &[AnalyzerFinding]) -> String {
    let mut blocks = Vec::with_capacity(findings.len());
    for (i, f) in findings.iter().enumerate() {
        let cwes = if f.cwes.is_empty() {
            "unmapped".to_string()
        } else {
            f.cwes
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        blocks.push(format!(
            "{}. {}\n   Rule: {} | Location: {}:{} | CWE: {} | Severity: {}",
            i + 1,
            f.message,
            f.rule_id,
            f.file,
            f.start_line,
            cwes,
            f.severity
        ));
    }
    blocks.join("\n")
}

fn serialize_fixed_history(history: &[(Cwe, String)]) -> String {
    history
        .iter()
        .map(|(cwe, desc)| {
            if desc.is_empty() {
                format!("- {cwe}")
            } else {
                format!("- {cwe}: {desc}")
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn serialize_adaptive(examples: &[ExamplePair]) -> String {
    if examples.is_empty() {
        return String::new();
    }
    let mut out = String::from(
        "Examples of vulnerable code and the corresponding fixed version for the identified CWEs:\n",
    );
    for pair in examples {
        out.push_str(&format!(
            "\n{}:\n{}\n\n{}\n",
            pair.cwe, pair.vulnerable_snippet, pair.fixed_snippet
        ));
        if !pair.note.is_empty() {
            out.push_str(&format!("Note: {}\n", pair.note));
        }
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Language;

    fn c_code() -> CodeArtifact {
        CodeArtifact::new(
            Language::C,
            "#include <stdio.h>\nint main(void) { return 0; }",
            "test",
        )
    }

    fn report(cwe: u16, justification: &str) -> VulnReport {
        VulnReport {
            vuln_type: format!("Type for {cwe}"),
            cwe: Cwe(cwe),
            address: format!("line_{cwe}();"),
            justification: justification.to_string(),
            response: "apply bounds checks".to_string(),
            span: (0, 1),
        }
    }

    fn fix_ctx() -> RenderContext {
        RenderContext {
            code: Some(c_code()),
            vuln_reports: vec![
                report(120, "first justification text"),
                report(367, "second justification text"),
            ],
            score_current: 0,
            ..Default::default()
        }
    }

    #[test]
    fn p3_contains_mandated_phrases_and_both_justifications() {
        let forge = PromptForge::builtin();
        let rendered = forge.render(TemplateId::FixP3, &fix_ctx()).unwrap();
        assert!(rendered
            .user
            .contains("1 point for each vulnerability fixed"));
        assert!(rendered.user.contains("Your current SCORE is : 0"));
        assert!(rendered.user.contains("first justification text"));
        assert!(rendered.user.contains("second justification text"));
        assert!(rendered.user.contains("<stdarg.h>"));
        assert!(rendered.user.contains("<stdio.h>"));
        assert!(rendered.user.contains("<stdlib.h>"));
        assert!(rendered.user.contains("<string.h>"));
        assert!(rendered.user.contains("include all required header files"));
        assert!(!rendered.user.contains(EP_OPEN));
        assert!(rendered.estimated_tokens > 0);
    }

    #[test]
    fn p2_output_line_then_code_fence() {
        let forge = PromptForge::builtin();
        let ctx = RenderContext::for_code(c_code());
        let rendered = forge.render(TemplateId::IdentifyP2, &ctx).unwrap();
        assert!(rendered.user.contains("identify any possible MITRE TOP 25"));
        let out_idx = rendered
            .user
            .find("Output: Vulnerability Type | CWE ID | Justification | Response.")
            .unwrap();
        let fence_idx = rendered.user.find("```c\n").unwrap();
        assert!(out_idx < fence_idx);
        assert!(rendered.user.trim_end().ends_with("```"));
    }

    #[test]
    fn p2p_contains_line_by_line_and_catalog() {
        let forge = PromptForge::builtin();
        let mut ctx = RenderContext::for_code(c_code());
        ctx.cwe_catalog = PromptForge::builtin_top25_catalog().to_string();
        let rendered = forge.render(TemplateId::IdentifyPrimeP2p, &ctx).unwrap();
        assert!(rendered
            .user
            .contains("Line by Line vulnerability analysis"));
        assert!(rendered.user.contains("CWE-787: Out-of-bounds Write"));
        assert!(rendered
            .user
            .contains("CWE-276: Incorrect Default Permissions"));
    }

    #[test]
    fn p3p_contains_resubmission_line_and_finding() {
        let forge = PromptForge::builtin();
        let mut ctx = RenderContext::for_code(c_code());
        ctx.analyzer_findings = vec![AnalyzerFinding {
            rule_id: "cpp/overflow-destination".to_string(),
            cwes: vec![Cwe(190)],
            message:
                "This 'call to sprintf' with input from username may overflow the destination."
                    .to_string(),
            file: "src/main.c".to_string(),
            start_line: 9,
            end_line: 9,
            severity: "error".to_string(),
        }];
        let rendered = forge.render(TemplateId::FixPrimeP3p, &ctx).unwrap();
        assert!(rendered
            .user
            .contains("This is re-submitted code since CodeQL identified"));
        assert!(rendered.user.contains("may overflow the destination"));
    }

    #[test]
    fn p4_contains_fixed_history_after_score() {
        let forge = PromptForge::builtin();
        let mut ctx = RenderContext::for_code(c_code());
        ctx.score_current = 3;
        ctx.fixed_history = vec![
            (Cwe(120), "bounded the scanf read".to_string()),
            (Cwe(367), "reworked the file open".to_string()),
        ];
        let rendered = forge.render(TemplateId::RecheckP4, &ctx).unwrap();
        let phrase = "The vulnerabilities fixed in the previous version are : 3";
        let idx = rendered.user.find(phrase).unwrap();
        let hist_idx = rendered
            .user
            .find("- CWE-120: bounded the scanf read")
            .unwrap();
        assert!(idx < hist_idx);
    }

    #[test]
    fn strip_ep_removes_every_point_mention() {
        let forge = PromptForge::builtin();
        let variant = strip_ep(TemplateId::FixP3).unwrap();
        let rendered = forge.render_variant(variant, &fix_ctx()).unwrap();
        assert!(!rendered.user.contains("point"));
        assert!(!rendered.user.contains("SCORE is"));
        assert!(rendered.user.contains("fix the vulnerabilities"));
        assert!(rendered
            .user
            .contains("Output: Fixed version | Original Score | Updated Score"));
    }

    #[test]
    fn strip_ep_rejects_non_ep_templates() {
        assert!(matches!(
            strip_ep(TemplateId::IdentifyP2),
            Err(ForgeError::NotAnEpTemplate(_))
        ));
        assert!(strip_ep(TemplateId::FixPrimeP3p).is_ok());
    }

    #[test]
    fn stripped_p3p_keeps_codeql_findings() {
        let forge = PromptForge::builtin();
        let mut ctx = RenderContext::for_code(c_code());
        ctx.analyzer_findings = vec![AnalyzerFinding {
            rule_id: "r".to_string(),
            cwes: vec![],
            message: "finding message text".to_string(),
            file: "src/main.c".to_string(),
            start_line: 1,
            end_line: 1,
            severity: "warning".to_string(),
        }];
        let variant = strip_ep(TemplateId::FixPrimeP3p).unwrap();
        let rendered = forge.render_variant(variant, &ctx).unwrap();
        assert!(rendered.user.contains("finding message text"));
        assert!(!rendered.user.contains("point"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let forge = PromptForge::builtin();
        let a = forge.render(TemplateId::FixP3, &fix_ctx()).unwrap();
        let b = forge.render(TemplateId::FixP3, &fix_ctx()).unwrap();
        assert_eq!(a.user, b.user);
    }

    #[test]
    fn inject_adaptive_adds_known_pairs_and_skips_unknown() {
        let store = AdaptiveStore::builtin();
        let ctx = RenderContext::default();
        let ctx = inject_adaptive(ctx, &store, &[Cwe(190)]);
        assert_eq!(ctx.adaptive_examples.len(), 1);
        assert!(ctx.adaptive_examples[0]
            .fixed_snippet
            .contains("data < LLONG_MAX"));

        let ctx = inject_adaptive(ctx, &store, &[Cwe(119)]);
        assert!(ctx.adaptive_examples[1]
            .fixed_snippet
            .contains("index >= 0 && index < len"));

        let before = ctx.adaptive_examples.len();
        let ctx = inject_adaptive(ctx, &store, &[Cwe(9999)]);
        assert_eq!(ctx.adaptive_examples.len(), before);
    }

    #[test]
    fn adaptive_examples_render_into_fix_prompt() {
        let forge = PromptForge::builtin();
        let store = AdaptiveStore::builtin();
        let ctx = inject_adaptive(fix_ctx(), &store, &[Cwe(190)]);
        let rendered = forge.render(TemplateId::FixP3, &ctx).unwrap();
        assert!(rendered.user.contains("LLONG_MAX"));
        let examples_idx = rendered.user.find("Examples of vulnerable code").unwrap();
        let output_idx = rendered.user.find("Output: Fixed version").unwrap();
        assert!(examples_idx < output_idx);
    }

    #[test]
    fn p1_wrapper_carries_prompt_and_header_clause() {
        let forge = PromptForge::builtin();
        let ctx = RenderContext {
            nl_prompt: Some(
                "Write C code to efficiently process file contents, calculate checksums, and save relevant information based on the checksum result."
                    .to_string(),
            ),
            language: Some(Language::C),
            ..Default::default()
        };
        let rendered = forge.render(TemplateId::GenWrapperP1, &ctx).unwrap();
        assert!(rendered
            .user
            .starts_with("Write C code to efficiently process"));
        assert!(rendered.user.contains("include all required header files"));
        assert!(rendered.user.contains("MUST have a main function"));
        assert!(rendered.user.contains("fenced code block tagged c"));
    }

    #[test]
    fn header_repair_embeds_compiler_log() {
        let forge = PromptForge::builtin();
        let mut ctx = RenderContext::for_code(c_code());
        ctx.compiler_log = Some("main.c:2:5: error: unknown type name 'FILE'".to_string());
        let rendered = forge.render(TemplateId::HeaderRepair, &ctx).unwrap();
        assert!(rendered.user.contains("failed to compile"));
        assert!(rendered.user.contains("unknown type name 'FILE'"));
        assert!(rendered.user.contains("include all required header files"));
    }

    #[test]
    fn missing_context_fields_are_rejected() {
        let forge = PromptForge::builtin();
        let empty = RenderContext::default();
        for id in TemplateId::ALL {
            assert!(
                matches!(
                    forge.render(id, &empty),
                    Err(ForgeError::MissingContextField { .. })
                ),
                "template {id} accepted an empty context"
            );
        }
    }

    #[test]
    fn strategy_variants_render_without_reward_text() {
        let forge = PromptForge::builtin();
        for strategy in [FixStrategy::Cot, FixStrategy::Coc, FixStrategy::Plain] {
            let rendered = forge.render_fix(strategy, &fix_ctx(), true).unwrap();
            assert!(!rendered.user.contains("point"), "{strategy:?}");
            assert!(rendered.user.contains("first justification text"));
        }
    }

    #[test]
    fn code_with_braces_renders_verbatim() {
        let forge = PromptForge::builtin();
        let mut ctx = fix_ctx();
        let tricky = "int main(void) { char buf[8]; if (1) { return 0; } }";
        ctx.code = Some(CodeArtifact::new(Language::C, tricky, "test"));
        let rendered = forge.render(TemplateId::FixP3, &ctx).unwrap();
        assert!(rendered.user.contains(tricky));
    }
}
