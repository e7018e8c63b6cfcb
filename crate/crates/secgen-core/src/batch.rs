//! Data-parallel batch driver.
//!
//! Each worker owns one run end-to-end: its provider scenario, its analyzer
//! instance, its run-store writer. Sample order in the output is the input
//! order regardless of scheduling, so batch results are deterministic. With
//! the `parallel` feature (default) runs fan out over a bounded rayon pool
//! sized by `jobs`; `run_batch_sequential` is the fallback and is always
//! available for comparison.

use thiserror::Error;

use crate::crosschecker::{analyzer_for, AnalyzerProfile};
use crate::metrics::{BatchLedger, RunRecord, VulnerableBasis};
use crate::model_gateway::{MockProvider, Provider};
use crate::orchestrator::{Orchestrator, RunConfig, RunError, RunInput};
use crate::prompt_forge::{AdaptiveStore, PromptForge};
use crate::runstore::{manifest_row, RunStore, StoreError};
use crate::scenario::ScenarioScript;

#[derive(Debug, Error)]
pub enum BatchError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("analyzer setup failed: {0}")]
    Analyzer(String),
    #[error("sample {0} has no scripted scenario and no live provider is configured")]
    MissingProvider(String),
}

/// One batch sample: what to run and, for mock batches, the scripted replies.
#[derive(Debug, Clone)]
pub struct BatchRunSpec {
    pub sample_id: String,
    pub input: RunInput,
    pub script: Option<ScenarioScript>,
    /// Per-sample language; corpora mix languages, the shared config cannot.
    pub language: Option<crate::types::Language>,
}

/// Shared immutable state for a batch.
pub struct BatchContext<'a> {
    pub config: &'a RunConfig,
    pub forge: &'a PromptForge,
    pub adaptive: &'a AdaptiveStore,
    pub catalog: &'a str,
    pub analyzer_profile: &'a AnalyzerProfile,
    /// Provider used for samples without a script (live batches).
    pub live_provider: Option<&'a (dyn Provider + Sync)>,
    pub store: &'a RunStore,
    pub command_label: &'a str,
}

pub struct BatchOutcome {
    pub records: Vec<RunRecord>,
    pub ledger: BatchLedger,
}

/// Filesystem-safe run id derived from a sample id.
pub fn run_id_for(sample_id: &str) -> String {
    sample_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn run_one(spec: &BatchRunSpec, ctx: &BatchContext<'_>) -> Result<RunRecord, BatchError> {
    let run_id = run_id_for(&spec.sample_id);
    let mut writer = ctx.store.writer(&run_id)?;
    let nl_prompt = match &spec.input {
        RunInput::NlPrompt(p) => Some(p.clone()),
        RunInput::GroundTruthCode(_) => None,
    };
    let mut config = ctx.config.clone();
    if let Some(language) = spec.language {
        config.target_language = language;
    } else if let RunInput::GroundTruthCode(code) = &spec.input {
        config.target_language = code.language;
    }
    ctx.store.append_manifest(&manifest_row(
        &run_id,
        ctx.command_label,
        Some(spec.sample_id.clone()),
        nl_prompt,
        &config,
    ))?;

    let analyzer = analyzer_for(ctx.analyzer_profile).map_err(BatchError::Analyzer)?;
    let mock;
    let provider: &dyn Provider = match &spec.script {
        Some(script) => {
            mock = MockProvider::scripted(script.replies.clone());
            &mock
        }
        None => ctx
            .live_provider
            .ok_or_else(|| BatchError::MissingProvider(spec.sample_id.clone()))?,
    };

    let orchestrator = Orchestrator {
        config: &config,
        forge: ctx.forge,
        adaptive: ctx.adaptive,
        provider,
        analyzer: analyzer.as_ref(),
        catalog: ctx.catalog,
    };
    let outcome = orchestrator.execute_run(&run_id, spec.input.clone(), &mut writer)?;
    // Fix-only samples were selected as vulnerable ground truth; the model's
    // first verdict only decides the after-generation basis.
    let initially_vulnerable = match &spec.input {
        RunInput::GroundTruthCode(_) => true,
        RunInput::NlPrompt(_) => outcome.initially_vulnerable,
    };
    Ok(RunRecord {
        sample_id: spec.sample_id.clone(),
        run_id,
        initially_vulnerable,
        secure_at: outcome.secure_at,
        termination: outcome.termination.kind,
        iterations_used: outcome.iterations.last().map(|r| r.index).unwrap_or(0),
    })
}

fn basis_for(specs: &[BatchRunSpec]) -> VulnerableBasis {
    if specs
        .iter()
        .all(|s| matches!(s.input, RunInput::GroundTruthCode(_)))
        && !specs.is_empty()
    {
        VulnerableBasis::GroundTruth
    } else {
        VulnerableBasis::AfterGeneration
    }
}

fn assemble(
    records: Vec<RunRecord>,
    specs: &[BatchRunSpec],
    ctx: &BatchContext<'_>,
) -> BatchOutcome {
    let ledger = BatchLedger::from_runs(
        records.clone(),
        basis_for(specs),
        ctx.config.config_label(),
        ctx.config.max_iterations,
    );
    BatchOutcome { records, ledger }
}

/// Run every sample on the calling thread, in order.
pub fn run_batch_sequential(
    specs: &[BatchRunSpec],
    ctx: &BatchContext<'_>,
) -> Result<BatchOutcome, BatchError> {
    let mut records = Vec::with_capacity(specs.len());
    for spec in specs {
        records.push(run_one(spec, ctx)?);
    }
    Ok(assemble(records, specs, ctx))
}

/// Run the batch with up to `jobs` workers (0 = one per CPU). Falls back to
/// the sequential driver for `jobs == 1` or when the `parallel` feature is
/// disabled.
#[cfg(feature = "parallel")]
pub fn run_batch(
    specs: &[BatchRunSpec],
    ctx: &BatchContext<'_>,
    jobs: usize,
) -> Result<BatchOutcome, BatchError> {
    use rayon::prelude::*;
    if jobs == 1 {
        return run_batch_sequential(specs, ctx);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| BatchError::Analyzer(format!("worker pool: {e}")))?;
    let records: Result<Vec<RunRecord>, BatchError> =
        pool.install(|| specs.par_iter().map(|spec| run_one(spec, ctx)).collect());
    Ok(assemble(records?, specs, ctx))
}

#[cfg(not(feature = "parallel"))]
pub fn run_batch(
    specs: &[BatchRunSpec],
    ctx: &BatchContext<'_>,
    _jobs: usize,
) -> Result<BatchOutcome, BatchError> {
    run_batch_sequential(specs, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{clean_script, fixed_at_script};
    use crate::types::Language;

    fn specs() -> Vec<BatchRunSpec> {
        let mut specs = Vec::new();
        for i in 0..4 {
            specs.push(BatchRunSpec {
                sample_id: format!("clean/{i}"),
                input: RunInput::NlPrompt(format!("Write Python code sample {i}.")),
                script: Some(clean_script(Language::Python)),
                language: Some(Language::Python),
            });
        }
        for i in 0..3 {
            specs.push(BatchRunSpec {
                sample_id: format!("vuln {i}"),
                input: RunInput::NlPrompt(format!("Write Python code task {i}.")),
                script: Some(fixed_at_script(Language::Python, 2)),
                language: Some(Language::Python),
            });
        }
        specs
    }

    fn run(jobs: usize, dir: &std::path::Path) -> BatchOutcome {
        let config = RunConfig::new(Language::Python);
        let forge = PromptForge::builtin();
        let adaptive = AdaptiveStore::builtin();
        let store = RunStore::open(dir).unwrap();
        let profile = AnalyzerProfile::offline();
        let ctx = BatchContext {
            config: &config,
            forge: &forge,
            adaptive: &adaptive,
            catalog: PromptForge::builtin_top25_catalog(),
            analyzer_profile: &profile,
            live_provider: None,
            store: &store,
            command_label: "batch-test",
        };
        run_batch(&specs(), &ctx, jobs).unwrap()
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let seq = run(1, dir_a.path());
        let par = run(4, dir_b.path());
        assert_eq!(seq.records.len(), par.records.len());
        assert_eq!(
            seq.ledger.initially_vulnerable,
            par.ledger.initially_vulnerable
        );
        for k in 0..=10 {
            assert_eq!(
                seq.ledger.remaining(k).unwrap(),
                par.ledger.remaining(k).unwrap(),
                "iteration {k}"
            );
        }
        // Output order matches input order in both modes.
        let ids: Vec<&str> = seq.records.iter().map(|r| r.sample_id.as_str()).collect();
        let ids_par: Vec<&str> = par.records.iter().map(|r| r.sample_id.as_str()).collect();
        assert_eq!(ids, ids_par);
    }

    #[test]
    fn run_ids_are_filesystem_safe() {
        assert_eq!(run_id_for("vuln 3"), "vuln_3");
        assert_eq!(run_id_for("a/b:c"), "a_b_c");
    }

    #[test]
    fn ground_truth_batch_uses_ground_truth_basis() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig::new(Language::Python);
        let forge = PromptForge::builtin();
        let adaptive = AdaptiveStore::builtin();
        let store = RunStore::open(dir.path()).unwrap();
        let profile = AnalyzerProfile::offline();
        let ctx = BatchContext {
            config: &config,
            forge: &forge,
            adaptive: &adaptive,
            catalog: PromptForge::builtin_top25_catalog(),
            analyzer_profile: &profile,
            live_provider: None,
            store: &store,
            command_label: "fix-test",
        };
        let code = crate::types::CodeArtifact::new(
            Language::Python,
            "import os\nprint(os.getcwd())\n",
            "ground-truth",
        );
        // Fix mode consumes no generation reply.
        let mut script = fixed_at_script(Language::Python, 1);
        script.replies.remove(0);
        let mut clean = clean_script(Language::Python);
        clean.replies.remove(0);
        let specs = vec![
            BatchRunSpec {
                sample_id: "gt-fixed".to_string(),
                input: RunInput::GroundTruthCode(code.clone()),
                script: Some(script),
                language: None,
            },
            BatchRunSpec {
                sample_id: "gt-clean-verdict".to_string(),
                input: RunInput::GroundTruthCode(code),
                script: Some(clean),
                language: None,
            },
        ];
        let outcome = run_batch_sequential(&specs, &ctx).unwrap();
        assert!(matches!(
            outcome.ledger.basis,
            crate::metrics::VulnerableBasis::GroundTruth
        ));
        // Every ground-truth sample counts as initially vulnerable, even the
        // one the model immediately declared clean.
        assert_eq!(outcome.ledger.initially_vulnerable, 2);
        for record in &outcome.records {
            assert!(record.initially_vulnerable);
        }
    }
}
