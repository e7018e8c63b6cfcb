//! Offline pattern analyzer.
//!
//! Detects a small fixed set of textual patterns — unbounded `scanf %s`,
//! `sprintf` into a buffer, `eval` on request data, and an enabled debug-mode
//! flag — enough to exercise every cross-check path hermetically. It is a
//! test double for a real analyzer, not a real analyzer: detection is
//! line-oriented and deliberately simple so that identical code always yields
//! the identical finding set.

use std::time::Duration;

use super::{
    compile_translation_unit, Analyzer, AnalyzerFinding, AnalyzerProfile, AnalyzerReport,
    BuildOutcome, ScanError, Workspace,
};
use crate::types::{CodeArtifact, Cwe, Language};

pub struct OfflinePatternAnalyzer {
    profile: AnalyzerProfile,
}

impl OfflinePatternAnalyzer {
    pub fn new(profile: AnalyzerProfile) -> Self {
        OfflinePatternAnalyzer { profile }
    }

    fn scan_lines(code: &CodeArtifact, file: &str) -> Vec<AnalyzerFinding> {
        let mut findings = Vec::new();
        for (idx, line) in code.source.lines().enumerate() {
            let line_no = (idx + 1) as u32;
            match code.language {
                Language::C | Language::Cpp => {
                    if has_unbounded_scanf(line) {
                        findings.push(make_finding(
                            "offline/c/scanf-unbounded",
                            &[120],
                            "This 'call to scanf' uses an unbounded %s conversion that may overflow the destination buffer.",
                            file,
                            line_no,
                            "error",
                        ));
                    }
                    if has_plain_sprintf(line) {
                        findings.push(make_finding(
                            "offline/c/sprintf-overflow",
                            &[190],
                            "This 'call to sprintf' with tainted input may overflow the destination.",
                            file,
                            line_no,
                            "error",
                        ));
                    }
                }
                Language::Python => {
                    if line.contains("eval(") && line.contains("request") {
                        findings.push(make_finding(
                            "offline/py/eval-request",
                            &[94],
                            "Call to 'eval' with data from an incoming request allows arbitrary code execution.",
                            file,
                            line_no,
                            "error",
                        ));
                    }
                    if line.contains("debug=True") {
                        findings.push(make_finding(
                            "offline/py/debug-enabled",
                            &[489],
                            "Application is configured to run with debug mode enabled.",
                            file,
                            line_no,
                            "warning",
                        ));
                    }
                }
            }
        }
        findings
    }
}

fn make_finding(
    rule: &str,
    cwes: &[u16],
    message: &str,
    file: &str,
    line: u32,
    severity: &str,
) -> AnalyzerFinding {
    AnalyzerFinding {
        rule_id: rule.to_string(),
        cwes: cwes.iter().map(|&n| Cwe(n)).collect(),
        message: message.to_string(),
        file: file.to_string(),
        start_line: line,
        end_line: line,
        severity: severity.to_string(),
    }
}

/// `scanf`/`fscanf`/`sscanf` whose format string has a `%s` without a width.
fn has_unbounded_scanf(line: &str) -> bool {
    if !line.contains("scanf") {
        return false;
    }
    let Some(call) = ["scanf", "fscanf", "sscanf"]
        .iter()
        .find_map(|name| find_call(line, name))
    else {
        return false;
    };
    let args = &line[call..];
    for (i, c) in args.char_indices() {
        if c != '%' {
            continue;
        }
        let rest = &args[i + 1..];
        let width: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
        if rest[width.len()..].starts_with('s') && width.is_empty() {
            return true;
        }
    }
    false
}

/// `sprintf(` but not `snprintf(`.
fn has_plain_sprintf(line: &str) -> bool {
    find_call(line, "sprintf").is_some()
}

fn find_call(line: &str, name: &str) -> Option<usize> {
    let mut search = 0;
    while let Some(idx) = line[search..].find(name) {
        let abs = search + idx;
        let prev = line[..abs].chars().next_back();
        let boundary_ok = prev.is_none_or(|c| !c.is_ascii_alphanumeric() && c != '_');
        let after = &line[abs + name.len()..];
        if boundary_ok && after.trim_start().starts_with('(') {
            return Some(abs);
        }
        search = abs + name.len();
    }
    None
}

impl Analyzer for OfflinePatternAnalyzer {
    fn scan(&self, code: &CodeArtifact) -> Result<AnalyzerReport, ScanError> {
        let workspace = Workspace::prepare(code)?;
        let timeout = Duration::from_secs(self.profile.scan_timeout_secs);
        let build = if code.language.requires_build() {
            compile_translation_unit(&workspace, code, timeout)?
        } else {
            BuildOutcome::trivial(workspace.path().display().to_string())
        };
        let file = workspace.relative_source(code);
        let findings = super::dedup_findings(Self::scan_lines(code, &file));
        Ok(AnalyzerReport { findings, build })
    }
}
