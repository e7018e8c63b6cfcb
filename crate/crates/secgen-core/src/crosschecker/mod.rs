//! External-feedback stage: compile, scan, and map findings to CWEs.
//!
//! Every scan gets a fresh temporary workspace (`src/` with a single source
//! file, `db/` for the analyzer database, `out/results.sarif`), so concurrent
//! scans never share paths. C and C++ are compiled before analysis; Python is
//! scanned directly. A build failure, analyzer crash, or timeout is always a
//! distinguished error — cleanliness is never inferred from failure.
//!
//! Three backends implement [`Analyzer`]: the CodeQL subprocess wrapper, an
//! offline pattern analyzer that makes the feedback loop testable without an
//! analyzer installation, and a scripted stand-in for orchestrator tests and
//! replay.

mod codeql;
mod offline;
mod sarif;

use std::collections::{BTreeMap, VecDeque};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{CodeArtifact, Cwe, Language};

pub use codeql::CodeQlAnalyzer;
pub use offline::OfflinePatternAnalyzer;
pub use sarif::parse_sarif;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ScanError {
    /// The code did not compile. The log feeds the header-repair round.
    #[error("build failed:\n{compiler_log}")]
    BuildFailed { compiler_log: String },
    #[error("analyzer crashed: {0}")]
    AnalyzerCrashed(String),
    #[error("analyzer timed out after {seconds}s")]
    Timeout { seconds: u64 },
    #[error("malformed SARIF document: {0}")]
    MalformedSarif(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalyzerKind {
    CodeQl,
    OfflinePattern,
}

/// Configuration for one analyzer backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyzerProfile {
    pub kind: AnalyzerKind,
    #[serde(default)]
    pub executable_path: Option<PathBuf>,
    #[serde(default = "default_query_suite")]
    pub query_suite: String,
    #[serde(default)]
    pub language_packs: Vec<String>,
    #[serde(default = "default_scan_timeout")]
    pub scan_timeout_secs: u64,
}

fn default_query_suite() -> String {
    // Security-extended maximizes CWE coverage of the Top-25.
    "security-extended".to_string()
}

fn default_scan_timeout() -> u64 {
    600
}

impl AnalyzerProfile {
    pub fn offline() -> Self {
        AnalyzerProfile {
            kind: AnalyzerKind::OfflinePattern,
            executable_path: None,
            query_suite: default_query_suite(),
            language_packs: Vec::new(),
            scan_timeout_secs: default_scan_timeout(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.kind == AnalyzerKind::CodeQl {
            match &self.executable_path {
                Some(path) if path.exists() => Ok(()),
                Some(path) => Err(format!("codeql executable not found at {}", path.display())),
                None => Err("codeql profile requires executable_path".to_string()),
            }
        } else {
            Ok(())
        }
    }
}

/// One static-analysis finding, rule mapped to CWEs where possible.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzerFinding {
    pub rule_id: String,
    pub cwes: Vec<Cwe>,
    pub message: String,
    /// Path relative to the scan workspace.
    pub file: String,
    pub start_line: u32,
    pub end_line: u32,
    pub severity: String,
}

impl AnalyzerFinding {
    fn severity_rank(&self) -> u8 {
        match self.severity.as_str() {
            "error" => 3,
            "warning" => 2,
            "note" => 1,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOutcome {
    pub success: bool,
    pub compiler_log: String,
    pub artifact_dir: String,
}

impl BuildOutcome {
    pub fn trivial(artifact_dir: impl Into<String>) -> Self {
        BuildOutcome {
            success: true,
            compiler_log: String::new(),
            artifact_dir: artifact_dir.into(),
        }
    }
}

/// Findings plus the build that produced them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzerReport {
    pub findings: Vec<AnalyzerFinding>,
    pub build: BuildOutcome,
}

impl AnalyzerReport {
    pub fn clean() -> Self {
        AnalyzerReport {
            findings: Vec::new(),
            build: BuildOutcome::trivial(""),
        }
    }

    pub fn is_clean(&self) -> bool {
        self.findings.is_empty() && self.build.success
    }
}

/// A static-analysis backend. Implementations must be safe to invoke from
/// concurrent runs.
pub trait Analyzer: Send + Sync {
    fn scan(&self, code: &CodeArtifact) -> Result<AnalyzerReport, ScanError>;
}

// ---------------------------------------------------------------------------
// rule → CWE mapping
// ---------------------------------------------------------------------------

/// Map a rule id to CWEs via the fallback table. SARIF CWE tags take
/// precedence and are applied upstream; findings that reach this point with
/// tags keep them. An unmapped rule yields an empty list — the finding is
/// still forwarded to prompts with its message only.
pub fn map_rule_to_cwe(rule_id: &str, fallback_table: &BTreeMap<String, Vec<Cwe>>) -> Vec<Cwe> {
    fallback_table.get(rule_id).cloned().unwrap_or_default()
}

/// Curated fallback entries for common C/C++ and Python security rules,
/// used when a SARIF result carries no CWE tags.
pub fn default_rule_cwe_table() -> BTreeMap<String, Vec<Cwe>> {
    let mut table = BTreeMap::new();
    let mut add = |rule: &str, cwes: &[u16]| {
        table.insert(rule.to_string(), cwes.iter().map(|&n| Cwe(n)).collect());
    };
    add("cpp/overflow-destination", &[120]);
    add("cpp/unbounded-write", &[787]);
    add("cpp/uncontrolled-arithmetic", &[190]);
    add("cpp/integer-overflow-tainted", &[190]);
    add("cpp/toctou-race-condition", &[367]);
    add("cpp/unsafe-strcat", &[120]);
    add("cpp/user-controlled-bypass", &[807]);
    add("py/code-injection", &[94]);
    add("py/flask-debug", &[489]);
    add("py/path-injection", &[22]);
    add("py/sql-injection", &[89]);
    add("py/unsafe-deserialization", &[502]);
    table
}

/// Apply the fallback table to findings whose SARIF tags carried no CWE.
pub fn apply_fallback_cwes(
    findings: &mut [AnalyzerFinding],
    fallback_table: &BTreeMap<String, Vec<Cwe>>,
) {
    for finding in findings {
        if finding.cwes.is_empty() {
            finding.cwes = map_rule_to_cwe(&finding.rule_id, fallback_table);
        }
    }
}

/// Deduplicate findings on (rule, file, start line), keeping first
/// occurrences in order.
pub fn dedup_findings(findings: Vec<AnalyzerFinding>) -> Vec<AnalyzerFinding> {
    let mut seen: Vec<(String, String, u32)> = Vec::new();
    let mut out = Vec::with_capacity(findings.len());
    for f in findings {
        let key = (f.rule_id.clone(), f.file.clone(), f.start_line);
        if !seen.contains(&key) {
            seen.push(key);
            out.push(f);
        }
    }
    out
}

/// Keep at most `cap` findings, highest severity first (stable within a
/// severity class). Returns the kept findings and how many were dropped.
pub fn cap_by_severity(
    mut findings: Vec<AnalyzerFinding>,
    cap: usize,
) -> (Vec<AnalyzerFinding>, usize) {
    if findings.len() <= cap {
        return (findings, 0);
    }
    let dropped = findings.len() - cap;
    findings.sort_by_key(|f| std::cmp::Reverse(f.severity_rank()));
    findings.truncate(cap);
    (findings, dropped)
}

// ---------------------------------------------------------------------------
// scan workspace
// ---------------------------------------------------------------------------

/// A fresh scan workspace: `src/main.<ext>`, `db/`, `out/`.
pub(crate) struct Workspace {
    pub dir: tempfile::TempDir,
    pub source_path: PathBuf,
}

impl Workspace {
    pub fn prepare(code: &CodeArtifact) -> Result<Workspace, ScanError> {
        let dir = tempfile::Builder::new()
            .prefix("secgen-scan-")
            .tempdir()
            .map_err(|e| ScanError::AnalyzerCrashed(format!("workspace: {e}")))?;
        let src = dir.path().join("src");
        let out = dir.path().join("out");
        let build = dir.path().join("build");
        for d in [&src, &out, &build] {
            std::fs::create_dir_all(d)
                .map_err(|e| ScanError::AnalyzerCrashed(format!("workspace: {e}")))?;
        }
        let source_path = src.join(format!("main.{}", code.language.extension()));
        std::fs::write(&source_path, &code.source)
            .map_err(|e| ScanError::AnalyzerCrashed(format!("workspace: {e}")))?;
        Ok(Workspace { dir, source_path })
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    /// Workspace-relative source file path, as reported in findings.
    pub fn relative_source(&self, code: &CodeArtifact) -> String {
        format!("src/main.{}", code.language.extension())
    }
}

/// Run a subprocess, enforcing the scan timeout. Returns (status ok, merged
/// stdout+stderr).
pub(crate) fn run_with_timeout(
    mut command: Command,
    timeout: Duration,
) -> Result<(bool, String), ScanError> {
    command.stdout(Stdio::piped()).stderr(Stdio::piped());
    let mut child = command
        .spawn()
        .map_err(|e| ScanError::AnalyzerCrashed(format!("spawn failed: {e}")))?;
    let stdout = child.stdout.take();
    let stderr = child.stderr.take();
    let out_handle = std::thread::spawn(move || read_all(stdout));
    let err_handle = std::thread::spawn(move || read_all(stderr));

    let deadline = Instant::now() + timeout;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {
                if Instant::now() >= deadline {
                    kill_quietly(&mut child);
                    return Err(ScanError::Timeout {
                        seconds: timeout.as_secs(),
                    });
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(e) => {
                kill_quietly(&mut child);
                return Err(ScanError::AnalyzerCrashed(format!("wait failed: {e}")));
            }
        }
    };
    let mut log = out_handle.join().unwrap_or_default();
    let err = err_handle.join().unwrap_or_default();
    if !err.is_empty() {
        if !log.is_empty() {
            log.push('\n');
        }
        log.push_str(&err);
    }
    Ok((status.success(), log))
}

fn read_all<R: Read>(reader: Option<R>) -> String {
    let mut buf = String::new();
    if let Some(mut r) = reader {
        let _ = r.read_to_string(&mut buf);
    }
    buf
}

fn kill_quietly(child: &mut Child) {
    let _ = child.kill();
    let _ = child.wait();
}

/// Compile a single C/C++ translation unit with the system compiler.
/// Warnings stay in the log without failing the build; linking is enabled
/// because generated programs are expected to carry a main function.
pub(crate) fn compile_translation_unit(
    workspace: &Workspace,
    code: &CodeArtifact,
    timeout: Duration,
) -> Result<BuildOutcome, ScanError> {
    let compiler = match code.language {
        Language::Cpp => "c++",
        _ => "cc",
    };
    let output = workspace.path().join("build").join("main");
    let mut cmd = Command::new(compiler);
    cmd.arg(&workspace.source_path)
        .arg("-o")
        .arg(&output)
        .arg("-Wall");
    let (ok, log) = run_with_timeout(cmd, timeout)?;
    if ok {
        Ok(BuildOutcome {
            success: true,
            compiler_log: log,
            artifact_dir: workspace.path().display().to_string(),
        })
    } else {
        let compiler_log = if log.is_empty() {
            "compiler produced no diagnostics".to_string()
        } else {
            log
        };
        Err(ScanError::BuildFailed { compiler_log })
    }
}

// ---------------------------------------------------------------------------
// scripted analyzer
// ---------------------------------------------------------------------------

/// Replays a fixed sequence of scan outcomes. Used by orchestrator tests,
/// fuzzing, and log replay.
pub struct ScriptedAnalyzer {
    outcomes: Mutex<VecDeque<Result<AnalyzerReport, ScanError>>>,
}

impl ScriptedAnalyzer {
    pub fn new(outcomes: Vec<Result<AnalyzerReport, ScanError>>) -> Self {
        ScriptedAnalyzer {
            outcomes: Mutex::new(outcomes.into()),
        }
    }

    pub fn remaining(&self) -> usize {
        self.outcomes.lock().expect("scripted analyzer lock").len()
    }
}

impl Analyzer for ScriptedAnalyzer {
    fn scan(&self, _code: &CodeArtifact) -> Result<AnalyzerReport, ScanError> {
        self.outcomes
            .lock()
            .expect("scripted analyzer lock")
            .pop_front()
            .unwrap_or_else(|| {
                Err(ScanError::AnalyzerCrashed(
                    "scripted analyzer exhausted".to_string(),
                ))
            })
    }
}

/// Build the analyzer backend for a profile.
pub fn analyzer_for(profile: &AnalyzerProfile) -> Result<Box<dyn Analyzer>, String> {
    profile.validate()?;
    match profile.kind {
        AnalyzerKind::OfflinePattern => Ok(Box::new(OfflinePatternAnalyzer::new(profile.clone()))),
        AnalyzerKind::CodeQl => Ok(Box::new(CodeQlAnalyzer::new(profile.clone()))),
    }
}
