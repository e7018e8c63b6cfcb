//! Operator entry point for the secure code generation engine.
//!
//! Subcommands: `generate` (one prompt end-to-end), `fix` (ground-truth code,
//! skipping generation), `batch` (corpus evaluation with FSR reports),
//! `analyze` (cross-check only), `report` (re-render a saved ledger),
//! `replay` (deterministic re-drive of a recorded run), and `corpus-stats`.
//!
//! Exit codes: 0 = completed with a secure verdict (or batch finished),
//! 2 = completed but still vulnerable / budget exhausted, 1 = operational
//! error. Errors are printed to stderr as `secgen: error: <Kind>: <detail>`.

mod config;

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use secgen_core::batch::{run_batch, BatchContext, BatchRunSpec};
use secgen_core::crosschecker::{analyzer_for, ScanError};
use secgen_core::metrics::{self, pass_at_1, pass_at_1_hook, ReportFormat};
use secgen_core::model_gateway::{HttpProvider, MockProvider, Provider, ProviderKind};
use secgen_core::orchestrator::{Orchestrator, RunConfig, RunInput, RunOutcome, TerminationKind};
use secgen_core::prompt_forge::{AdaptiveStore, PromptForge};
use secgen_core::replay::replay;
use secgen_core::runstore::{manifest_row, EventPayload, RunStore};
use secgen_core::scenario::{BatchScenario, ScenarioScript};
use secgen_core::types::CodeArtifact;

use config::{effective_provider, effective_run_config, parse_language, FileConfig, Overrides};

#[derive(Parser)]
#[command(
    name = "secgen",
    about = "Iterative secure code generation: generate, identify/fix, cross-check",
    version
)]
struct Cli {
    /// TOML config file with provider and analyzer profiles.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory that receives runs/, reports/, and final code.
    #[arg(long, global = true, default_value = "out")]
    output_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate secure code from a natural-language prompt.
    Generate {
        /// The request text.
        #[arg(long, conflicts_with = "prompt_file")]
        prompt: Option<String>,
        /// File containing the request text.
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        /// Target language: c, cpp, or python.
        #[arg(long)]
        language: String,
        /// Scripted replies for the mock provider (JSON: {"replies": [...]}).
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Identify and fix vulnerabilities in existing code (generation skipped).
    Fix {
        /// Single source file to harden.
        #[arg(long, conflicts_with = "corpus")]
        code_file: Option<PathBuf>,
        /// Language of --code-file.
        #[arg(long)]
        language: Option<String>,
        /// Corpus of records carrying ground_truth_code.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Scenario file (single {"replies": []} for --code-file, batch
        /// layout for --corpus).
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Worker pool size for corpus mode.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a corpus of prompts and report FSR trajectories.
    Batch {
        /// Corpus file (.jsonl or .csv).
        #[arg(long)]
        corpus: PathBuf,
        /// Batch scenario file for the mock provider.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Worker pool size.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Drop near-duplicate prompts above this token-set similarity.
        #[arg(long)]
        dedupe_threshold: Option<f64>,
        /// Functional test command run once per secured sample; `{code}` is
        /// replaced with the final code path. Exit 0 counts as a pass.
        #[arg(long)]
        test_command: Option<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the static-analyzer cross-check on a source file.
    Analyze {
        #[arg(long)]
        code_file: PathBuf,
        #[arg(long)]
        language: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Render a saved batch ledger in another format.
    Report {
        /// Ledger file (defaults to <output-dir>/reports/ledger.json).
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// table, json, or csv.
        #[arg(long, default_value = "table")]
        format: String,
    },
    /// Re-drive a recorded run and verify it reproduces exactly.
    Replay {
        /// Run id under <output-dir>/runs/.
        #[arg(long)]
        run: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Load, deduplicate, and summarize a corpus.
    CorpusStats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        dedupe_threshold: f64,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            // Stable machine-parseable prefix, kind token first.
            let kind = error_kind(&e);
            eprintln!("secgen: error: {kind}: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    let text = format!("{e:#}");
    if text.contains("diverged") {
        "DivergenceDetected"
    } else if text.contains("log corrupt") {
        "LogCorrupt"
    } else if text.contains("not found") || text.contains("No such file") {
        "MissingFile"
    } else if text.contains("invalid configuration") || text.contains("parsing config") {
        "ConfigInvalid"
    } else if text.contains("provider") {
        "ProviderFailure"
    } else {
        "OperationFailed"
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    let file_config = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Generate {
            prompt,
            prompt_file,
            language,
            scenario,
            overrides,
        } => {
            let language = parse_language(&language)?;
            let prompt = read_prompt(prompt, prompt_file)?;
            let config = effective_run_config(language, &file_config, &overrides, false)?;
            single_run(
                "generate",
                RunInput::NlPrompt(prompt.clone()),
                Some(prompt),
                &config,
                &file_config,
                &overrides,
                scenario.as_deref(),
                &cli.output_dir,
            )
        }
        Command::Fix {
            code_file,
            language,
            corpus,
            scenario,
            jobs,
            overrides,
        } => match (code_file, corpus) {
            (Some(code_file), None) => {
                let language = parse_language(
                    language
                        .as_deref()
                        .ok_or_else(|| anyhow!("--language is required with --code-file"))?,
                )?;
                let source = std::fs::read_to_string(&code_file)
                    .with_context(|| format!("reading {}", code_file.display()))?;
                let config = effective_run_config(language, &file_config, &overrides, false)?;
                let artifact = CodeArtifact::new(language, source, "ground-truth");
                single_run(
                    "fix",
                    RunInput::GroundTruthCode(artifact),
                    None,
                    &config,
                    &file_config,
                    &overrides,
                    scenario.as_deref(),
                    &cli.output_dir,
                )
            }
            (None, Some(corpus)) => batch_command(
                &corpus,
                scenario.as_deref(),
                jobs,
                None,
                None,
                true,
                &file_config,
                &overrides,
                &cli.output_dir,
            ),
            _ => bail!("fix needs exactly one of --code-file or --corpus"),
        },
        Command::Batch {
            corpus,
            scenario,
            jobs,
            dedupe_threshold,
            test_command,
            overrides,
        } => batch_command(
            &corpus,
            scenario.as_deref(),
            jobs,
            dedupe_threshold,
            test_command.as_deref(),
            false,
            &file_config,
            &overrides,
            &cli.output_dir,
        ),
        Command::Analyze {
            code_file,
            language,
            overrides,
        } => analyze_command(&code_file, &language, &file_config, &overrides),
        Command::Report { ledger, format } => {
            let path = ledger.unwrap_or_else(|| cli.output_dir.join("reports/ledger.json"));
            let format = ReportFormat::parse(&format)
                .ok_or_else(|| anyhow!("unknown report format {format:?}"))?;
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading ledger {}", path.display()))?;
            let ledger: metrics::BatchLedger =
                serde_json::from_str(&text).context("parsing ledger")?;
            print!("{}", metrics::render_report(&ledger, format));
            Ok(0)
        }
        Command::Replay { run, overrides } => {
            let store = RunStore::open(&cli.output_dir)?;
            let assets = Assets::load(&overrides)?;
            let outcome = replay(
                &store,
                &run,
                &assets.forge,
                &assets.adaptive,
                &assets.catalog,
            )
            .map_err(|e| anyhow!("{e}"))?;
            println!(
                "replay ok: {} transitions, termination {:?}",
                outcome.transitions.len(),
                outcome.termination.kind
            );
            Ok(0)
        }
        Command::CorpusStats {
            corpus,
            dedupe_threshold,
        } => {
            let format = secgen_core::corpus::CorpusFormat::infer(&corpus);
            let load = secgen_core::corpus::load(&corpus, format).map_err(|e| anyhow!("{e}"))?;
            let outcome = secgen_core::corpus::dedupe(load.records, dedupe_threshold);
            let mut summary = secgen_core::corpus::summarize(&outcome.kept);
            summary.duplicates_removed = outcome.removed.len();
            for removal in &outcome.removed {
                eprintln!(
                    "secgen: note: removed near-duplicate {} (matches {}, similarity {:.3})",
                    removal.removed.id, removal.duplicate_of, removal.similarity
                );
            }
            if !load.row_errors.is_empty() {
                for err in &load.row_errors {
                    eprintln!("secgen: note: row {}: {}", err.line, err.message);
                }
            }
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(0)
        }
    }
}

/// Prompt-rendering assets resolved from overrides (built-ins by default).
struct Assets {
    forge: PromptForge,
    adaptive: AdaptiveStore,
    catalog: String,
}

impl Assets {
    /// A template directory holds one `<key>.txt` per template and may also
    /// carry the Top-25 catalog (`mitre_top25_2023.txt`) and an `adaptive/`
    /// example library; explicit flags override those, built-ins fill gaps.
    fn load(overrides: &Overrides) -> Result<Assets> {
        let forge = match &overrides.templates_dir {
            Some(dir) => PromptForge::from_dir(dir).map_err(|e| anyhow!("{e}"))?,
            None => PromptForge::builtin(),
        };
        let adaptive_dir = overrides.adaptive_dir.clone().or_else(|| {
            overrides
                .templates_dir
                .as_ref()
                .map(|dir| dir.join("adaptive"))
                .filter(|p| p.is_dir())
        });
        let adaptive = match adaptive_dir {
            Some(dir) => AdaptiveStore::from_dir(&dir).map_err(|e| anyhow!("{e}"))?,
            None => AdaptiveStore::builtin(),
        };
        let catalog_path = overrides.catalog.clone().or_else(|| {
            overrides
                .templates_dir
                .as_ref()
                .map(|dir| dir.join("mitre_top25_2023.txt"))
                .filter(|p| p.is_file())
        });
        let catalog = match catalog_path {
            Some(path) => std::fs::read_to_string(&path)
                .with_context(|| format!("reading catalog {}", path.display()))?,
            None => PromptForge::builtin_top25_catalog().to_string(),
        };
        Ok(Assets {
            forge,
            adaptive,
            catalog,
        })
    }
}

fn read_prompt(prompt: Option<String>, prompt_file: Option<PathBuf>) -> Result<String> {
    let text = match (prompt, prompt_file) {
        (Some(p), None) => p,
        (None, Some(path)) => std::fs::read_to_string(&path)
            .with_context(|| format!("reading prompt file {}", path.display()))?,
        _ => bail!("provide exactly one of --prompt or --prompt-file"),
    };
    let text = text.trim().to_string();
    if text.is_empty() {
        bail!("the prompt is empty");
    }
    Ok(text)
}

fn read_scenario(path: Option<&Path>) -> Result<Option<ScenarioScript>> {
    match path {
        None => Ok(None),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading scenario {}", path.display()))?;
            let script: ScenarioScript = serde_json::from_str(&text)
                .with_context(|| format!("parsing scenario {}", path.display()))?;
            Ok(Some(script))
        }
    }
}

fn fresh_run_id(prefix: &str) -> String {
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    format!("{prefix}-{nanos:x}")
}

fn exit_code_for(kind: TerminationKind) -> i32 {
    match kind {
        TerminationKind::SecureConfirmed => 0,
        TerminationKind::BudgetExhausted | TerminationKind::BuildFailureFinal => 2,
        TerminationKind::ProviderFailure | TerminationKind::UserAbort => 1,
    }
}

fn write_final_code(
    output_dir: &Path,
    run_id: &str,
    outcome: &RunOutcome,
) -> Result<Option<PathBuf>> {
    let Some(code) = &outcome.final_code else {
        return Ok(None);
    };
    let final_dir = output_dir.join("final");
    std::fs::create_dir_all(&final_dir)?;
    let path = final_dir.join(format!("{run_id}.{}", code.language.extension()));
    std::fs::write(&path, &code.source)?;
    Ok(Some(path))
}

#[allow(clippy::too_many_arguments)]
fn single_run(
    command: &str,
    input: RunInput,
    nl_prompt: Option<String>,
    config: &RunConfig,
    file_config: &FileConfig,
    overrides: &Overrides,
    scenario: Option<&Path>,
    output_dir: &Path,
) -> Result<i32> {
    let assets = Assets::load(overrides)?;
    let profile = effective_provider(file_config, config, overrides)?;
    let analyzer_profile = file_config.analyzer(&config.analyzer_profile)?;
    let analyzer = analyzer_for(&analyzer_profile).map_err(|e| anyhow!("{e}"))?;

    let script = read_scenario(scenario)?;
    let mock;
    let http;
    let provider: &dyn Provider = match profile.kind {
        ProviderKind::Mock => {
            let script =
                script.ok_or_else(|| anyhow!("mock provider needs --scenario with replies"))?;
            let m = MockProvider::new(profile.clone());
            m.script(script.replies);
            mock = m;
            &mock
        }
        ProviderKind::Http => {
            http = HttpProvider::new(profile.clone()).map_err(|e| anyhow!("{e}"))?;
            &http
        }
    };

    let store = RunStore::open(output_dir)?;
    let run_id = fresh_run_id(command);
    store.append_manifest(&manifest_row(&run_id, command, None, nl_prompt, config))?;
    let mut writer = store.writer(&run_id)?;
    let orchestrator = Orchestrator {
        config,
        forge: &assets.forge,
        adaptive: &assets.adaptive,
        provider,
        analyzer: analyzer.as_ref(),
        catalog: &assets.catalog,
    };
    let outcome = orchestrator.execute_run(&run_id, input, &mut writer)?;

    let final_path = write_final_code(output_dir, &run_id, &outcome)?;
    println!("run: {run_id}");
    println!(
        "termination: {:?} ({})",
        outcome.termination.kind, outcome.termination.detail
    );
    println!("iterations: {}", outcome.iterations.len());
    if let Some(path) = final_path {
        println!("final code: {}", path.display());
    }
    Ok(exit_code_for(outcome.termination.kind))
}

#[allow(clippy::too_many_arguments)]
fn batch_command(
    corpus_path: &Path,
    scenario: Option<&Path>,
    jobs: usize,
    dedupe_threshold: Option<f64>,
    test_command: Option<&str>,
    fix_mode: bool,
    file_config: &FileConfig,
    overrides: &Overrides,
    output_dir: &Path,
) -> Result<i32> {
    let format = secgen_core::corpus::CorpusFormat::infer(corpus_path);
    let load = secgen_core::corpus::load(corpus_path, format).map_err(|e| anyhow!("{e}"))?;
    for err in &load.row_errors {
        eprintln!("secgen: note: corpus row {}: {}", err.line, err.message);
    }
    let records = match dedupe_threshold {
        Some(threshold) => {
            let outcome = secgen_core::corpus::dedupe(load.records, threshold);
            eprintln!(
                "secgen: note: removed {} near-duplicate prompts",
                outcome.removed.len()
            );
            outcome.kept
        }
        None => load.records,
    };
    if records.is_empty() {
        bail!("corpus has no usable records");
    }

    // The batch driver defaults the escalation ladder on; flags still win.
    let language = records[0].target_language;
    let config = effective_run_config(language, file_config, overrides, true)?;
    let profile = effective_provider(file_config, &config, overrides)?;
    let analyzer_profile = file_config.analyzer(&config.analyzer_profile)?;
    let assets = Assets::load(overrides)?;

    let batch_scenario: Option<BatchScenario> = match scenario {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading scenario {}", path.display()))?;
            Some(BatchScenario::from_json(&text).context("parsing batch scenario")?)
        }
        None => None,
    };

    let mut specs = Vec::new();
    let mut skipped = 0usize;
    for record in &records {
        let input = if fix_mode {
            match &record.ground_truth_code {
                Some(code) => RunInput::GroundTruthCode(CodeArtifact::new(
                    record.target_language,
                    code.clone(),
                    "ground-truth",
                )),
                None => {
                    skipped += 1;
                    continue;
                }
            }
        } else {
            RunInput::NlPrompt(record.nl_prompt.clone())
        };
        let script = batch_scenario
            .as_ref()
            .and_then(|s| s.script_for(&record.id).cloned());
        specs.push(BatchRunSpec {
            sample_id: record.id.clone(),
            input,
            script,
            language: Some(record.target_language),
        });
    }
    if skipped > 0 {
        eprintln!("secgen: note: skipped {skipped} records without ground_truth_code");
    }
    if specs.is_empty() {
        bail!("no runnable records (fix mode needs ground_truth_code)");
    }

    let http;
    let live_provider: Option<&(dyn Provider + Sync)> = match profile.kind {
        ProviderKind::Http => {
            http = HttpProvider::new(profile.clone()).map_err(|e| anyhow!("{e}"))?;
            Some(&http)
        }
        ProviderKind::Mock => None,
    };

    let store = RunStore::open(output_dir)?;
    let ctx = BatchContext {
        config: &config,
        forge: &assets.forge,
        adaptive: &assets.adaptive,
        catalog: &assets.catalog,
        analyzer_profile: &analyzer_profile,
        live_provider,
        store: &store,
        command_label: if fix_mode { "fix" } else { "batch" },
    };
    let outcome = run_batch(&specs, &ctx, jobs).map_err(|e| anyhow!("{e}"))?;

    let reports_dir = output_dir.join("reports");
    metrics::write_reports(&outcome.ledger, &reports_dir)?;
    print!(
        "{}",
        metrics::render_report(&outcome.ledger, ReportFormat::TableText)
    );
    println!("reports: {}", reports_dir.display());

    // Export each run's final code and optionally score functional tests.
    let mut final_paths = Vec::new();
    for record in &outcome.records {
        if let Some(path) = export_final_snapshot(&store, &record.run_id, output_dir)? {
            final_paths.push((record.sample_id.clone(), path));
        }
    }
    if let Some(command) = test_command {
        let results = pass_at_1_hook(&final_paths, command);
        let outcomes: Vec<bool> = results.iter().map(|r| r.passed).collect();
        match pass_at_1(&outcomes) {
            Some(rate) => println!("pass@1: {rate:.4} over {} samples", outcomes.len()),
            None => println!("pass@1: absent (no samples ran)"),
        }
        std::fs::write(
            reports_dir.join("pass_at_1.json"),
            serde_json::to_string_pretty(&results)?,
        )?;
    }
    Ok(0)
}

/// Pull the last code snapshot of a run out of the store and write it under
/// final/.
fn export_final_snapshot(
    store: &RunStore,
    run_id: &str,
    output_dir: &Path,
) -> Result<Option<PathBuf>> {
    let entries = store.read_log(run_id).map_err(|e| anyhow!("{e}"))?;
    let last = entries.iter().rev().find_map(|e| match &e.payload {
        EventPayload::CodeSnapshot {
            language, source, ..
        } => Some((*language, source.clone())),
        _ => None,
    });
    let Some((language, source)) = last else {
        return Ok(None);
    };
    let final_dir = output_dir.join("final");
    std::fs::create_dir_all(&final_dir)?;
    let path = final_dir.join(format!("{run_id}.{}", language.extension()));
    std::fs::write(&path, source)?;
    Ok(Some(path))
}

fn analyze_command(
    code_file: &Path,
    language: &str,
    file_config: &FileConfig,
    overrides: &Overrides,
) -> Result<i32> {
    let language = parse_language(language)?;
    let source = std::fs::read_to_string(code_file)
        .with_context(|| format!("reading {}", code_file.display()))?;
    let analyzer_name = overrides.analyzer.as_deref().unwrap_or("offline");
    let profile = file_config.analyzer(analyzer_name)?;
    let analyzer = analyzer_for(&profile).map_err(|e| anyhow!("{e}"))?;
    let code = CodeArtifact::new(language, source, "analyze");
    match analyzer.scan(&code) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(if report.findings.is_empty() { 0 } else { 2 })
        }
        Err(ScanError::BuildFailed { compiler_log }) => {
            eprintln!("secgen: build failed:\n{compiler_log}");
            Ok(2)
        }
        Err(e) => Err(anyhow!("{e}")),
    }
}
