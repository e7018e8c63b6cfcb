//! End-to-end tests of the secgen binary: exit codes, file outputs, flag
//! precedence, and the machine-parseable error prefix.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use secgen_core::scenario::{clean_script, fixed_at_script, stubborn_script, BatchScenario};
use secgen_core::types::Language;

fn secgen() -> Command {
    Command::new(env!("CARGO_BIN_EXE_secgen"))
}

fn write_scenario(
    dir: &Path,
    name: &str,
    script: secgen_core::scenario::ScenarioScript,
) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&script).unwrap()).unwrap();
    path
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).to_string()
}

#[test]
fn generate_with_mock_scenario_writes_secure_code() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), "s.json", fixed_at_script(Language::Python, 1));
    let prompt_file = dir.path().join("p.txt");
    std::fs::write(
        &prompt_file,
        "Write Python code to efficiently process file contents, calculate checksums, and save relevant information based on the checksum result.",
    )
    .unwrap();
    let out_dir = dir.path().join("out");

    let output = secgen()
        .args(["--output-dir", out_dir.to_str().unwrap()])
        .args(["generate", "--prompt-file", prompt_file.to_str().unwrap()])
        .args(["--language", "python"])
        .args(["--scenario", scenario.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        stderr_of(&output)
    );
    let stdout = stdout_of(&output);
    assert!(stdout.contains("SecureConfirmed"), "stdout: {stdout}");

    // The final code file exists and is non-empty.
    let final_dir = out_dir.join("final");
    let files: Vec<_> = std::fs::read_dir(&final_dir).unwrap().collect();
    assert_eq!(files.len(), 1);
    let path = files[0].as_ref().unwrap().path();
    assert!(std::fs::metadata(&path).unwrap().len() > 0);
    assert_eq!(path.extension().unwrap(), "py");

    // The manifest echoes the effective config.
    let manifest = std::fs::read_to_string(out_dir.join("runs/manifest.jsonl")).unwrap();
    assert!(manifest.contains("\"max_iterations\":10"));
}

#[test]
fn generate_budget_exhaustion_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), "s.json", stubborn_script(Language::Python, 1));
    let out_dir = dir.path().join("out");
    let output = secgen()
        .args(["--output-dir", out_dir.to_str().unwrap()])
        .args([
            "generate",
            "--prompt",
            "Write Python code to checksum files.",
        ])
        .args(["--language", "python"])
        .args(["--max-iterations", "1", "--no-escalate"])
        .args(["--scenario", scenario.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(2),
        "stderr: {}",
        stderr_of(&output)
    );
    assert!(stdout_of(&output).contains("BudgetExhausted"));
}

#[test]
fn flag_overrides_land_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("cfg.toml");
    std::fs::write(
        &config_path,
        "[run]\nmax_iterations = 7\ntemperature_initial = 0.2\n",
    )
    .unwrap();
    let scenario = write_scenario(dir.path(), "s.json", clean_script(Language::Python));
    let out_dir = dir.path().join("out");
    let output = secgen()
        .args(["--config", config_path.to_str().unwrap()])
        .args(["--output-dir", out_dir.to_str().unwrap()])
        .args([
            "generate",
            "--prompt",
            "Write Python code to checksum files.",
        ])
        .args(["--language", "python"])
        .args(["--temperature", "0.3"]) // CLI beats config file
        .args(["--scenario", scenario.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        stderr_of(&output)
    );
    let manifest = std::fs::read_to_string(out_dir.join("runs/manifest.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    assert_eq!(row["config"]["temperature_initial"], 0.3);
    assert_eq!(row["config"]["max_iterations"], 7);
}

#[test]
fn batch_without_crosscheck_reports_llm_c_label() {
    let dir = tempfile::tempdir().unwrap();
    // Three-sample corpus with one near-duplicate id layout.
    let corpus_path = dir.path().join("corpus.jsonl");
    let mut corpus = String::new();
    for i in 0..3 {
        corpus.push_str(&format!(
            "{}\n",
            serde_json::json!({
                "id": format!("s{i}"),
                "nl_prompt": format!("Write Python code for task number {i}."),
                "target_language": "python",
                "source": "unit",
            })
        ));
    }
    std::fs::write(&corpus_path, corpus).unwrap();

    let mut scenario = BatchScenario::default();
    scenario
        .samples
        .insert("s0".into(), clean_script(Language::Python));
    scenario
        .samples
        .insert("s1".into(), fixed_at_script(Language::Python, 1));
    scenario
        .samples
        .insert("s2".into(), fixed_at_script(Language::Python, 2));
    let scenario_path = dir.path().join("batch.json");
    std::fs::write(&scenario_path, scenario.to_json()).unwrap();

    let out_dir = dir.path().join("out");
    let output = secgen()
        .args(["--output-dir", out_dir.to_str().unwrap()])
        .args(["batch", "--corpus", corpus_path.to_str().unwrap()])
        .args(["--scenario", scenario_path.to_str().unwrap()])
        .args(["--no-crosscheck", "--jobs", "2"])
        .args(["--test-command", "test -s {code}"])
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        stderr_of(&output)
    );
    let stdout = stdout_of(&output);
    assert!(stdout.contains("configuration: LLM/C"), "stdout: {stdout}");
    // All three samples produced non-empty final code, so the functional
    // hook reports a full pass rate.
    assert!(stdout.contains("pass@1: 1.0000"), "stdout: {stdout}");
    assert!(out_dir.join("reports/pass_at_1.json").exists());

    let report = std::fs::read_to_string(out_dir.join("reports/report.txt")).unwrap();
    assert!(report.contains("configuration: LLM/C"));
    // No analyzer events anywhere.
    for run in ["s0", "s1", "s2"] {
        let log = std::fs::read_to_string(out_dir.join(format!("runs/{run}/log.jsonl"))).unwrap();
        assert!(!log.contains("AnalyzerScan"), "{run} invoked the analyzer");
    }

    // The saved ledger re-renders through the report command.
    let output = secgen()
        .args(["--output-dir", out_dir.to_str().unwrap()])
        .args(["report", "--format", "csv"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    assert!(stdout_of(&output).starts_with("iteration,remaining,fsr"));
}

#[test]
fn replay_reproduces_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), "s.json", fixed_at_script(Language::Python, 2));
    let out_dir = dir.path().join("out");
    let output = secgen()
        .args(["--output-dir", out_dir.to_str().unwrap()])
        .args([
            "generate",
            "--prompt",
            "Write Python code to checksum files.",
        ])
        .args(["--language", "python"])
        .args(["--scenario", scenario.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let run_id = stdout_of(&output)
        .lines()
        .find_map(|l| l.strip_prefix("run: ").map(str::to_string))
        .expect("run id printed");

    let output = secgen()
        .args(["--output-dir", out_dir.to_str().unwrap()])
        .args(["replay", "--run", &run_id])
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        stderr_of(&output)
    );
    assert!(stdout_of(&output).contains("replay ok"));

    // Tamper with a logged payload: replay must fail loudly (the digest
    // check catches it before any re-drive).
    let log_path = out_dir.join(format!("runs/{run_id}/log.jsonl"));
    let text = std::fs::read_to_string(&log_path).unwrap();
    std::fs::write(
        &log_path,
        text.replacen("no vulnerabilities", "no vulnerability?", 1),
    )
    .unwrap();
    let output = secgen()
        .args(["--output-dir", out_dir.to_str().unwrap()])
        .args(["replay", "--run", &run_id])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = stderr_of(&output);
    assert!(stderr.starts_with("secgen: error:"), "stderr: {stderr}");
    assert!(stderr.contains("LogCorrupt"), "stderr: {stderr}");

    // A digest-consistent rewrite (payload changed, digest recomputed) gets
    // past integrity checking and must surface as divergence instead.
    let mut lines: Vec<secgen_core::runstore::RunLogEntry> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mut rewritten = false;
    for entry in &mut lines {
        if let secgen_core::runstore::EventPayload::ModelCall { reply_text, .. } =
            &mut entry.payload
        {
            if reply_text.contains("no vulnerabilities") && !rewritten {
                *reply_text = "Suddenly a completely different reply.".to_string();
                entry.payload_digest = entry.payload.digest();
                rewritten = true;
            }
        }
    }
    assert!(rewritten);
    let forged: String = lines
        .iter()
        .map(|e| format!("{}\n", serde_json::to_string(e).unwrap()))
        .collect();
    std::fs::write(&log_path, forged).unwrap();
    let output = secgen()
        .args(["--output-dir", out_dir.to_str().unwrap()])
        .args(["replay", "--run", &run_id])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = stderr_of(&output);
    assert!(stderr.contains("DivergenceDetected"), "stderr: {stderr}");
}

#[test]
fn fix_mode_skips_generation_stage() {
    let dir = tempfile::tempdir().unwrap();
    let code_path = dir.path().join("input.py");
    std::fs::write(&code_path, "import os\n\nprint(os.getcwd())\n").unwrap();
    let mut replies = fixed_at_script(Language::Python, 1);
    replies.replies.remove(0); // fix mode consumes no generation reply
    let scenario = write_scenario(dir.path(), "s.json", replies);
    let out_dir = dir.path().join("out");
    let output = secgen()
        .args(["--output-dir", out_dir.to_str().unwrap()])
        .args(["fix", "--code-file", code_path.to_str().unwrap()])
        .args(["--language", "python"])
        .args(["--scenario", scenario.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        stderr_of(&output)
    );

    let run_id = stdout_of(&output)
        .lines()
        .find_map(|l| l.strip_prefix("run: ").map(str::to_string))
        .unwrap();
    let log = std::fs::read_to_string(out_dir.join(format!("runs/{run_id}/log.jsonl"))).unwrap();
    assert!(!log.contains("S1Generate"), "fix mode must skip S1");
    let first_transition = log
        .lines()
        .find(|l| l.contains("\"kind\":\"Transition\""))
        .unwrap();
    assert!(first_transition.contains("\"to\":\"S2Identify\""));
}

#[test]
fn analyze_exits_by_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let vulnerable = dir.path().join("app.py");
    std::fs::write(
        &vulnerable,
        "from flask import Flask, request\napp = Flask(__name__)\nvalue = eval(request.args.get('x'))\n",
    )
    .unwrap();
    let output = secgen()
        .args(["analyze", "--code-file", vulnerable.to_str().unwrap()])
        .args(["--language", "python"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(stdout_of(&output).contains("offline/py/eval-request"));

    let clean = dir.path().join("clean.py");
    std::fs::write(&clean, "print('checksum ready')\n").unwrap();
    let output = secgen()
        .args(["analyze", "--code-file", clean.to_str().unwrap()])
        .args(["--language", "python"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
}

#[test]
fn corpus_stats_prints_summary_json() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("c.jsonl");
    let rows = [
        serde_json::json!({"id": "a", "nl_prompt": "Write C code to process files", "target_language": "c", "source": "unit"}),
        serde_json::json!({"id": "b", "nl_prompt": "Write C code to process files", "target_language": "c", "source": "unit"}),
        serde_json::json!({"id": "c", "nl_prompt": "Build a Python HTTP client", "target_language": "python", "source": "unit"}),
    ];
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    std::fs::write(&corpus_path, text).unwrap();
    let output = secgen()
        .args(["corpus-stats", "--corpus", corpus_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let summary: serde_json::Value = serde_json::from_str(&stdout_of(&output)).unwrap();
    assert_eq!(summary["total"], 2); // identical prompt removed
    assert_eq!(summary["duplicates_removed"], 1);
}

#[test]
fn missing_corpus_is_an_operational_error() {
    let output = secgen()
        .args(["corpus-stats", "--corpus", "/nonexistent/x.jsonl"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr_of(&output).starts_with("secgen: error:"));
}
