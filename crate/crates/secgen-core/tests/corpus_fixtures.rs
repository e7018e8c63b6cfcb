//! Fixture-backed integration tests: the LEval-shaped prompt corpus, the
//! offline analyzer's annotated corpus, and store-backed record/replay.

use std::path::{Path, PathBuf};

use secgen_core::corpus::{self, CorpusFormat};
use secgen_core::crosschecker::{analyzer_for, AnalyzerProfile};
use secgen_core::metrics::{render_report, BatchLedger, ReportFormat, RunRecord, VulnerableBasis};
use secgen_core::model_gateway::MockProvider;
use secgen_core::orchestrator::{Orchestrator, RunConfig, RunInput, TerminationKind};
use secgen_core::prompt_forge::{AdaptiveStore, PromptForge};
use secgen_core::replay::{replay, ReplayError};
use secgen_core::runstore::{manifest_row, RunStore, StoreError};
use secgen_core::scenario::fixed_at_script;
use secgen_core::types::{CodeArtifact, Language};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn leval_distribution_loads_150_records() {
    let load = corpus::load(&fixture("leval_nl_prompts.jsonl"), CorpusFormat::Jsonl).unwrap();
    assert_eq!(load.records.len(), 150);
    assert!(load.row_errors.is_empty());
    let summary = corpus::summarize(&load.records);
    assert_eq!(summary.total, 150);
    assert_eq!(summary.per_dataset["LEval"], 150);
    let c = summary.per_language.get("C").copied().unwrap_or(0);
    let py = summary.per_language.get("Python").copied().unwrap_or(0);
    assert_eq!(c + py, 150);
    assert!(c > 0 && py > 0, "LEval mixes C and Python prompts");
}

/// Parse `flag:` annotations out of a fixture: (1-based line, rule id).
fn annotations(source: &str) -> Vec<(u32, String)> {
    source
        .lines()
        .enumerate()
        .filter_map(|(idx, line)| {
            line.split("flag:").nth(1).map(|rest| {
                let rule = rest.trim().trim_end_matches("*/").trim().to_string();
                ((idx + 1) as u32, rule)
            })
        })
        .collect()
}

#[test]
fn offline_analyzer_flags_exactly_the_annotated_lines() {
    let analyzer = analyzer_for(&AnalyzerProfile::offline()).unwrap();
    let cases = [
        ("offline_corpus/vulnerable.c", Language::C),
        ("offline_corpus/clean.c", Language::C),
        ("offline_corpus/webapp.py", Language::Python),
        ("offline_corpus/clean.py", Language::Python),
    ];
    for (name, language) in cases {
        let source = std::fs::read_to_string(fixture(name)).unwrap();
        let expected = annotations(&source);
        let code = CodeArtifact::new(language, source, "fixture");
        let report = analyzer.scan(&code).unwrap_or_else(|e| {
            panic!("{name}: scan failed: {e}");
        });
        let mut actual: Vec<(u32, String)> = report
            .findings
            .iter()
            .map(|f| (f.start_line, f.rule_id.clone()))
            .collect();
        let mut expected_sorted = expected.clone();
        actual.sort();
        expected_sorted.sort();
        assert_eq!(
            actual, expected_sorted,
            "{name}: findings disagree with annotations"
        );
    }
}

/// The batch-table rendering of a 150-sample ledger (73 vulnerable,
/// remaining 35/17/13/9/6 and stuck at 6 through I10) is pinned to a golden
/// file.
#[test]
fn table_report_matches_golden() {
    let mut runs = Vec::new();
    for i in 0..77 {
        runs.push(RunRecord {
            sample_id: format!("clean-{i}"),
            run_id: format!("clean-{i}"),
            initially_vulnerable: false,
            secure_at: Some(0),
            termination: TerminationKind::SecureConfirmed,
            iterations_used: 0,
        });
    }
    let fixed_at = [(1u32, 38u32), (2, 18), (3, 4), (4, 4), (5, 3)];
    let mut n = 0;
    for (k, count) in fixed_at {
        for _ in 0..count {
            runs.push(RunRecord {
                sample_id: format!("vuln-{n}"),
                run_id: format!("vuln-{n}"),
                initially_vulnerable: true,
                secure_at: Some(k),
                termination: TerminationKind::SecureConfirmed,
                iterations_used: k,
            });
            n += 1;
        }
    }
    for _ in 0..6 {
        runs.push(RunRecord {
            sample_id: format!("vuln-{n}"),
            run_id: format!("vuln-{n}"),
            initially_vulnerable: true,
            secure_at: None,
            termination: TerminationKind::BudgetExhausted,
            iterations_used: 10,
        });
        n += 1;
    }
    let ledger =
        BatchLedger::from_runs(runs, VulnerableBasis::AfterGeneration, "EP+crosscheck", 10);
    let rendered = render_report(&ledger, ReportFormat::TableText);
    let path = fixture("../golden/report_table.golden.txt");
    if std::env::var("SECGEN_BLESS").is_ok() {
        std::fs::write(&path, &rendered).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).expect("report golden exists");
    assert_eq!(expected, rendered);
}

#[test]
fn file_backed_record_then_replay_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::open(dir.path()).unwrap();
    let config = RunConfig::new(Language::Python);
    let forge = PromptForge::builtin();
    let adaptive = AdaptiveStore::builtin();
    let catalog = PromptForge::builtin_top25_catalog();
    let prompt = "Write Python code to checksum files.";

    let script = fixed_at_script(Language::Python, 2);
    let provider = MockProvider::scripted(script.replies);
    let analyzer = analyzer_for(&AnalyzerProfile::offline()).unwrap();
    let orchestrator = Orchestrator {
        config: &config,
        forge: &forge,
        adaptive: &adaptive,
        provider: &provider,
        analyzer: analyzer.as_ref(),
        catalog,
    };
    store
        .append_manifest(&manifest_row(
            "replay-me",
            "generate",
            None,
            Some(prompt.to_string()),
            &config,
        ))
        .unwrap();
    let mut writer = store.writer("replay-me").unwrap();
    let recorded = orchestrator
        .execute_run(
            "replay-me",
            RunInput::NlPrompt(prompt.to_string()),
            &mut writer,
        )
        .unwrap();
    assert_eq!(recorded.termination.kind, TerminationKind::SecureConfirmed);
    drop(writer);

    let replayed = replay(&store, "replay-me", &forge, &adaptive, catalog).unwrap();
    assert_eq!(replayed.transitions, recorded.transitions);
    assert_eq!(
        replayed.final_code.map(|c| c.digest()),
        recorded.final_code.map(|c| c.digest())
    );

    // Tampering with any payload is caught before replay starts.
    let log_path = dir.path().join("runs/replay-me/log.jsonl");
    let text = std::fs::read_to_string(&log_path).unwrap();
    let tampered = text.replacen("no vulnerabilities", "no vulnerability!", 1);
    assert_ne!(text, tampered);
    std::fs::write(&log_path, tampered).unwrap();
    match replay(&store, "replay-me", &forge, &adaptive, catalog) {
        Err(ReplayError::Store(StoreError::LogCorrupt(_))) => {}
        other => panic!("expected LogCorrupt, got {other:?}"),
    }
}
