//! CodeQL subprocess wrapper: database build, query run, SARIF ingestion.

use std::path::PathBuf;
use std::process::Command;
use std::time::Duration;

use super::{
    apply_fallback_cwes, compile_translation_unit, dedup_findings, default_rule_cwe_table,
    parse_sarif, Analyzer, AnalyzerProfile, AnalyzerReport, BuildOutcome, ScanError, Workspace,
};
use crate::types::{CodeArtifact, Language};

pub struct CodeQlAnalyzer {
    profile: AnalyzerProfile,
}

impl CodeQlAnalyzer {
    pub fn new(profile: AnalyzerProfile) -> Self {
        CodeQlAnalyzer { profile }
    }

    fn executable(&self) -> PathBuf {
        self.profile
            .executable_path
            .clone()
            .unwrap_or_else(|| PathBuf::from("codeql"))
    }

    fn ql_language(language: Language) -> &'static str {
        match language {
            Language::C | Language::Cpp => "cpp",
            Language::Python => "python",
        }
    }
}

impl Analyzer for CodeQlAnalyzer {
    fn scan(&self, code: &CodeArtifact) -> Result<AnalyzerReport, ScanError> {
        let workspace = Workspace::prepare(code)?;
        let timeout = Duration::from_secs(self.profile.scan_timeout_secs);

        // C/C++ must compile before a database can be built; surface the
        // compiler diagnostics directly rather than CodeQL's wrapper error.
        let build = if code.language.requires_build() {
            compile_translation_unit(&workspace, code, timeout)?
        } else {
            BuildOutcome::trivial(workspace.path().display().to_string())
        };

        let db_dir = workspace.path().join("db");
        let mut create = Command::new(self.executable());
        create
            .arg("database")
            .arg("create")
            .arg(&db_dir)
            .arg(format!("--language={}", Self::ql_language(code.language)))
            .arg("--source-root")
            .arg(workspace.path().join("src"));
        if code.language.requires_build() {
            let compiler = if code.language == Language::Cpp {
                "c++"
            } else {
                "cc"
            };
            create.arg(format!(
                "--command={} main.{} -o main",
                compiler,
                code.language.extension()
            ));
        }
        let (ok, log) = super::run_with_timeout(create, timeout)?;
        if !ok {
            return Err(ScanError::AnalyzerCrashed(format!(
                "codeql database create failed:\n{log}"
            )));
        }

        let sarif_path = workspace.path().join("out").join("results.sarif");
        let suite = if self.profile.query_suite.is_empty() {
            format!("{}-security-extended", Self::ql_language(code.language))
        } else if self.profile.query_suite.contains('/')
            || self.profile.query_suite.ends_with(".qls")
        {
            self.profile.query_suite.clone()
        } else {
            format!(
                "{}-{}",
                Self::ql_language(code.language),
                self.profile.query_suite
            )
        };
        let mut analyze = Command::new(self.executable());
        analyze
            .arg("database")
            .arg("analyze")
            .arg(&db_dir)
            .arg(&suite)
            .arg("--format=sarif-latest")
            .arg("--output")
            .arg(&sarif_path)
            .arg("--threads=1");
        for pack in &self.profile.language_packs {
            analyze.arg("--download").arg(pack);
        }
        let (ok, log) = super::run_with_timeout(analyze, timeout)?;
        if !ok {
            return Err(ScanError::AnalyzerCrashed(format!(
                "codeql database analyze failed:\n{log}"
            )));
        }

        let document = std::fs::read_to_string(&sarif_path)
            .map_err(|e| ScanError::AnalyzerCrashed(format!("missing SARIF output: {e}")))?;
        let mut findings = parse_sarif(&document)?;
        apply_fallback_cwes(&mut findings, &default_rule_cwe_table());
        let findings = dedup_findings(findings);
        Ok(AnalyzerReport { findings, build })
    }
}
