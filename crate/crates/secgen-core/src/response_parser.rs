//! Turns free-text model replies into typed records.
//!
//! Model output formatting drifts, so parsing here is tolerant: clean
//! sentinels are matched loosely, finding blocks are keyed on CWE mentions
//! plus labeled fields, and code is pulled from fenced blocks. Strictness
//! lives in the orchestrator's format-reminder reprompt, not in the parser.
//! Every parsed finding keeps its source character span for audit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{CodeArtifact, Cwe, Language};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    /// Neither a clean sentinel nor any CWE-bearing block found.
    #[error("unparseable reply: no clean sentinel and no CWE-bearing block")]
    Unparseable,
    /// No extractable fenced code block.
    #[error("no extractable code block in reply")]
    NoCodeBlock,
}

/// One structured vulnerability record parsed from model output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnReport {
    pub vuln_type: String,
    pub cwe: Cwe,
    /// Offending line(s) or snippet quoted by the model.
    pub address: String,
    pub justification: String,
    /// Suggested mitigation.
    pub response: String,
    /// Byte span of the finding block within the original reply.
    pub span: (usize, usize),
}

/// The model declared the code clean.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanVerdict {
    pub reason: String,
}

/// Outcome of an identification / recheck reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum IdentificationOutcome {
    Clean(CleanVerdict),
    Vulnerable {
        reports: Vec<VulnReport>,
        /// The "Score: -1 * N" value some identification replies carry.
        /// Stored for the log, never used downstream.
        reported_score: Option<i64>,
    },
}

/// Parsed fix-round reply: new code plus the model's own accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixReport {
    pub fixed_code: CodeArtifact,
    pub original_score: i64,
    pub updated_score: i64,
    pub fixed_list: Vec<(Cwe, String)>,
    /// True when the reply carried no scores and they were inferred from
    /// the fallback score and the fixed list length.
    pub scores_inferred: bool,
}

const FIELD_LABELS: [&str; 7] = [
    "address",
    "vulnerable line(s) of code",
    "vulnerable lines",
    "vulnerable line",
    "justification",
    "response",
    "mitigation",
];

/// Classify an identification reply as clean or a list of findings.
pub fn parse_identification(reply: &str) -> Result<IdentificationOutcome, ParseError> {
    if let Some(reason) = clean_sentinel(reply) {
        return Ok(IdentificationOutcome::Clean(CleanVerdict { reason }));
    }
    let mut reports = parse_labeled_blocks(reply);
    if reports.is_empty() {
        reports = parse_bare_mentions(reply);
    }
    if reports.is_empty() {
        return Err(ParseError::Unparseable);
    }
    Ok(IdentificationOutcome::Vulnerable {
        reports,
        reported_score: reported_score(reply),
    })
}

/// Parse a fix-round reply into a [`FixReport`].
///
/// Scores are searched by label; when absent the original score falls back
/// to `fallback_score` and the updated score is inferred from the number of
/// claimed fixes. The authoritative score is settled by the scorekeeper
/// either way.
pub fn parse_fix(
    reply: &str,
    language: Language,
    fallback_score: i64,
) -> Result<FixReport, ParseError> {
    let fixed_code = extract_code(reply, language)?;
    let prose = strip_fenced_blocks(reply);
    let original = labeled_number(&prose, "original score");
    let updated = labeled_number(&prose, "updated score");
    let fixed_list = cwe_mentions_with_text(&prose);
    let (original_score, updated_score, scores_inferred) = match (original, updated) {
        (Some(o), Some(u)) => (o, u, false),
        (Some(o), None) => (o, o + fixed_list.len() as i64, true),
        _ => (
            fallback_score,
            fallback_score + fixed_list.len() as i64,
            true,
        ),
    };
    Ok(FixReport {
        fixed_code,
        original_score,
        updated_score,
        fixed_list,
        scores_inferred,
    })
}

/// Extract the program source from a reply.
///
/// Prefers fenced blocks tagged with the target language, then untagged
/// fences, then any fence; among candidates of the preferred class the
/// longest body wins. The extraction method is recorded in the artifact
/// lineage.
pub fn extract_code(reply: &str, language: Language) -> Result<CodeArtifact, ParseError> {
    let fences = find_fences(reply);
    if fences.is_empty() {
        return Err(ParseError::NoCodeBlock);
    }
    let accepted = language.accepted_tags();
    let pick = |class: &[&Fence]| -> Option<(String, String)> {
        class
            .iter()
            .max_by_key(|f| f.body.len())
            .map(|f| (f.body.clone(), f.method()))
    };
    let tagged: Vec<&Fence> = fences
        .iter()
        .filter(|f| accepted.contains(&f.tag.to_ascii_lowercase().as_str()))
        .collect();
    let untagged: Vec<&Fence> = fences.iter().filter(|f| f.tag.is_empty()).collect();
    let (body, method) = pick(&tagged)
        .or_else(|| pick(&untagged).map(|(b, _)| (b, "untagged-fallback".to_string())))
        .or_else(|| {
            pick(&fences.iter().collect::<Vec<_>>())
                .map(|(b, _)| (b, "foreign-tag-fallback".to_string()))
        })
        .ok_or(ParseError::NoCodeBlock)?;
    Ok(CodeArtifact::new(
        language,
        body,
        format!("extract:{method}"),
    ))
}

// ---------------------------------------------------------------------------
// fenced block scanning
// ---------------------------------------------------------------------------

struct Fence {
    tag: String,
    body: String,
    start: usize,
    end: usize,
}

fn find_fences(reply: &str) -> Vec<Fence> {
    let mut fences = Vec::new();
    let mut open: Option<(String, usize)> = None; // (tag, body start offset)
    let mut offset = 0;
    for line in reply.split_inclusive('\n') {
        let content = line.strip_suffix('\n').unwrap_or(line);
        let content = content.strip_suffix('\r').unwrap_or(content);
        let trimmed = content.trim_start();
        match &open {
            None => {
                if let Some(rest) = trimmed.strip_prefix("```") {
                    let tag = rest.trim().to_string();
                    open = Some((tag, offset + line.len()));
                }
            }
            Some((tag, body_start)) => {
                if trimmed.trim_end() == "```" {
                    // Strip exactly the newline the embed step added.
                    let body_end = offset.saturating_sub(1).max(*body_start);
                    fences.push(Fence {
                        tag: tag.clone(),
                        body: reply[*body_start..body_end].to_string(),
                        start: *body_start,
                        end: offset + line.len(),
                    });
                    open = None;
                }
            }
        }
        offset += line.len();
    }
    // Tolerate an unclosed fence at end of reply (truncated output).
    if let Some((tag, body_start)) = open {
        if body_start < reply.len() {
            fences.push(Fence {
                tag,
                body: reply[body_start..].to_string(),
                start: body_start,
                end: reply.len(),
            });
        }
    }
    fences
}

impl Fence {
    fn method(&self) -> String {
        if self.tag.is_empty() {
            "untagged".to_string()
        } else {
            format!("fenced:{}", self.tag.to_ascii_lowercase())
        }
    }
}

fn strip_fenced_blocks(reply: &str) -> String {
    let fences = find_fences(reply);
    let mut out = String::with_capacity(reply.len());
    let mut pos = 0;
    for f in &fences {
        if f.start > pos {
            out.push_str(&reply[pos..f.start]);
        }
        pos = f.end.max(pos);
    }
    if pos < reply.len() {
        out.push_str(&reply[pos..]);
    }
    out
}

// ---------------------------------------------------------------------------
// identification parsing
// ---------------------------------------------------------------------------

fn clean_sentinel(reply: &str) -> Option<String> {
    let lower = reply.to_lowercase();
    if lower.contains("no vulnerabilities") {
        return Some("sentinel: no vulnerabilities".to_string());
    }
    for line in reply.lines() {
        let stripped: String = line
            .chars()
            .filter(|c| c.is_ascii_alphanumeric() || *c == ' ')
            .collect();
        if stripped.trim().eq_ignore_ascii_case("none") {
            return Some("sentinel: None".to_string());
        }
    }
    None
}

fn reported_score(reply: &str) -> Option<i64> {
    labeled_number(reply, "score")
}

fn labeled_number(text: &str, label: &str) -> Option<i64> {
    let lower = text.to_lowercase();
    let mut search = 0;
    while let Some(idx) = lower[search..].find(label) {
        let after = &text[search + idx + label.len()..];
        let after = after.trim_start_matches(|c: char| {
            c.is_whitespace() || matches!(c, ':' | '=' | '|' | '-' | '\'' | '"' | '*')
        });
        let mut digits = String::new();
        let mut chars = after.chars();
        let mut first = chars.next();
        if first == Some('-') {
            digits.push('-');
            first = chars.next();
        }
        if let Some(c) = first {
            if c.is_ascii_digit() {
                digits.push(c);
                for c in chars {
                    if c.is_ascii_digit() {
                        digits.push(c);
                    } else {
                        break;
                    }
                }
                return digits.parse().ok();
            }
        }
        search += idx + label.len();
    }
    None
}

fn first_cwe_in(text: &str) -> Option<(Cwe, usize)> {
    let lower = text.to_lowercase();
    let mut search = 0;
    while let Some(idx) = lower[search..].find("cwe") {
        let abs = search + idx;
        let token: String = text[abs..]
            .chars()
            .take_while(|c| !c.is_whitespace() && *c != '|' && *c != ',' && *c != '(')
            .collect();
        // "CWE 120" splits on the space; try joining the next token.
        let candidate = if token.eq_ignore_ascii_case("cwe") {
            let rest = text[abs + token.len()..].trim_start();
            let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
            format!("CWE-{digits}")
        } else {
            token
        };
        if let Some(cwe) = Cwe::parse(&candidate) {
            return Some((cwe, abs));
        }
        search = abs + 3;
    }
    None
}

fn all_cwes_in(text: &str) -> Vec<(Cwe, usize)> {
    let mut out = Vec::new();
    let mut pos = 0;
    while let Some((cwe, idx)) = first_cwe_in(&text[pos..]) {
        out.push((cwe, pos + idx));
        pos = pos + idx + 3;
    }
    out
}

fn label_of(line: &str) -> Option<(&'static str, String)> {
    let cleaned = line.trim_start_matches(|c: char| {
        c.is_whitespace() || matches!(c, '*' | '-' | '#' | '>' | '•')
    });
    let lower = cleaned.to_lowercase();
    for raw in FIELD_LABELS {
        if lower.starts_with(raw) {
            let rest = &cleaned[raw.len()..];
            let value = rest
                .trim_start_matches(|c: char| c.is_whitespace() || matches!(c, ':' | '*' | '-'))
                .trim()
                .to_string();
            let canon = match raw {
                "address"
                | "vulnerable line(s) of code"
                | "vulnerable lines"
                | "vulnerable line" => "address",
                "justification" => "justification",
                _ => "response",
            };
            return Some((canon, value));
        }
    }
    None
}

/// A line that plausibly opens a finding block: it mentions a CWE id and is
/// either enumerated ("1.", "2)"), starts with the id, or names the type.
fn is_block_head(line: &str) -> Option<Cwe> {
    let (cwe, idx) = first_cwe_in(line)?;
    let before = &line[..idx];
    let cleaned = before
        .trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '-' | '#' | '>'));
    let enumerated = {
        let digits: String = cleaned.chars().take_while(|c| c.is_ascii_digit()).collect();
        !digits.is_empty() && cleaned[digits.len()..].starts_with(['.', ')'])
    };
    let starts_with_id = cleaned.is_empty();
    let typed = cleaned.to_lowercase().contains("vulnerability type")
        || cleaned.to_lowercase().contains("vulnerability name");
    if enumerated || starts_with_id || typed {
        Some(cwe)
    } else {
        None
    }
}

fn parse_labeled_blocks(reply: &str) -> Vec<VulnReport> {
    // Pipe-delimited rows first: "Type | CWE-120 | justification | response".
    let mut reports = Vec::new();
    let mut offset = 0;
    for line in reply.split_inclusive('\n') {
        let content = line.trim_end_matches(['\n', '\r']);
        if content.matches('|').count() >= 2 {
            if let Some(report) = parse_pipe_row(content, offset) {
                reports.push(report);
            }
        }
        offset += line.len();
    }
    if !reports.is_empty() {
        return reports;
    }

    // Block format: heads found by CWE mention, fields by label search.
    let lines: Vec<(usize, &str)> = {
        let mut v = Vec::new();
        let mut off = 0;
        for line in reply.split_inclusive('\n') {
            v.push((off, line.trim_end_matches(['\n', '\r'])));
            off += line.len();
        }
        v
    };
    let heads: Vec<(usize, Cwe)> = lines
        .iter()
        .enumerate()
        .filter_map(|(i, (_, line))| is_block_head(line).map(|c| (i, c)))
        .collect();
    for (hi, &(line_idx, cwe)) in heads.iter().enumerate() {
        let block_end_line = heads
            .get(hi + 1)
            .map(|&(next, _)| next)
            .unwrap_or(lines.len());
        let head_line = lines[line_idx].1;
        let span_start = lines[line_idx].0;
        let span_end = if block_end_line < lines.len() {
            lines[block_end_line].0
        } else {
            reply.len()
        };
        let mut address = String::new();
        let mut justification = String::new();
        let mut response = String::new();
        let mut current: Option<&'static str> = None;
        for (_, line) in &lines[line_idx + 1..block_end_line] {
            if let Some((field, value)) = label_of(line) {
                current = Some(field);
                let slot = match field {
                    "address" => &mut address,
                    "justification" => &mut justification,
                    _ => &mut response,
                };
                if !slot.is_empty() {
                    slot.push('\n');
                }
                slot.push_str(&value);
            } else if let Some(field) = current {
                // Continuation of a multi-line field value.
                let slot = match field {
                    "address" => &mut address,
                    "justification" => &mut justification,
                    _ => &mut response,
                };
                if !line.trim().is_empty() {
                    slot.push('\n');
                    slot.push_str(line.trim());
                }
            }
        }
        // Without any labeled field this is not a finding block (it could be
        // a summary trailer like "CWE of found vulnerabilities: ...").
        if address.is_empty() && justification.is_empty() && response.is_empty() {
            continue;
        }
        let vuln_type = head_type_text(head_line, cwe);
        if justification.is_empty() {
            justification = head_line.trim().to_string();
        }
        reports.push(VulnReport {
            vuln_type,
            cwe,
            address,
            justification,
            response,
            span: (span_start, span_end),
        });
    }
    reports
}

fn parse_pipe_row(line: &str, offset: usize) -> Option<VulnReport> {
    let cells: Vec<&str> = line.split('|').map(str::trim).collect();
    let cwe_idx = cells.iter().position(|c| Cwe::parse(c).is_some())?;
    let cwe = Cwe::parse(cells[cwe_idx]).expect("position checked");
    let vuln_type = cells[..cwe_idx]
        .iter()
        .map(|c| {
            c.trim_start_matches(|ch: char| {
                ch.is_ascii_digit() || ch.is_whitespace() || matches!(ch, '.' | ')' | '*' | '-')
            })
        })
        .filter(|c| !c.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    let after: Vec<&str> = cells[cwe_idx + 1..].to_vec();
    let (justification, address, response) = match after.len() {
        0 => (String::new(), String::new(), String::new()),
        1 => (after[0].to_string(), String::new(), String::new()),
        2 => (after[0].to_string(), String::new(), after[1].to_string()),
        // P2'-shaped rows: justification | vulnerable line(s) | mitigation
        _ => (
            after[0].to_string(),
            after[1].to_string(),
            after[after.len() - 1].to_string(),
        ),
    };
    let justification = if justification.is_empty() {
        line.trim().to_string()
    } else {
        justification
    };
    Some(VulnReport {
        vuln_type,
        cwe,
        address,
        justification,
        response,
        span: (offset, offset + line.len()),
    })
}

fn head_type_text(head_line: &str, cwe: Cwe) -> String {
    let lower = head_line.to_lowercase();
    let needle = cwe.to_string().to_lowercase();
    let after = match lower.find(&needle) {
        Some(idx) => &head_line[idx + needle.len()..],
        None => {
            // Head used a variant spelling ("CWE 120"); find digits instead.
            let digits = cwe.0.to_string();
            match head_line.find(&digits) {
                Some(idx) => &head_line[idx + digits.len()..],
                None => head_line,
            }
        }
    };
    after
        .trim_start_matches(|c: char| c.is_whitespace() || matches!(c, ':' | '-' | '–' | '|'))
        .trim_end()
        .to_string()
}

fn parse_bare_mentions(reply: &str) -> Vec<VulnReport> {
    let mut seen = Vec::new();
    let mut reports = Vec::new();
    let mut offset = 0;
    for line in reply.split_inclusive('\n') {
        let content = line.trim_end_matches(['\n', '\r']);
        for (cwe, _) in all_cwes_in(content) {
            if seen.contains(&cwe) {
                continue;
            }
            seen.push(cwe);
            reports.push(VulnReport {
                vuln_type: String::new(),
                cwe,
                address: String::new(),
                justification: content.trim().to_string(),
                response: String::new(),
                span: (offset, offset + content.len()),
            });
        }
        offset += line.len();
    }
    reports
}

fn cwe_mentions_with_text(prose: &str) -> Vec<(Cwe, String)> {
    let mut out: Vec<(Cwe, String)> = Vec::new();
    for line in prose.lines() {
        for (cwe, idx) in all_cwes_in(line) {
            if out.iter().any(|(c, _)| *c == cwe) {
                continue;
            }
            let after = &line[idx..];
            let desc = after
                .trim_start_matches(|c: char| !c.is_whitespace() && c != ':')
                .trim_start_matches(|c: char| c.is_whitespace() || matches!(c, ':' | '-' | '–'))
                .trim_end()
                .to_string();
            out.push((cwe, desc));
        }
    }
    out
}
