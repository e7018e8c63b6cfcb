//! Batch-driver throughput: sequential loop vs rayon pool over a scripted
//! mock batch. Run with `cargo bench -p secgen-core`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tempfile::TempDir;

use secgen_core::batch::{run_batch, run_batch_sequential, BatchContext, BatchRunSpec};
use secgen_core::crosschecker::AnalyzerProfile;
use secgen_core::orchestrator::{RunConfig, RunInput};
use secgen_core::prompt_forge::{AdaptiveStore, PromptForge};
use secgen_core::runstore::RunStore;
use secgen_core::scenario::{compile_trajectory, TrajectorySpec};
use secgen_core::types::Language;

fn specs(total: u32) -> Vec<BatchRunSpec> {
    let vulnerable = total * 2 / 5;
    let spec = TrajectorySpec {
        total,
        initially_vulnerable: vulnerable,
        anchors: vec![(1, vulnerable / 2), (3, vulnerable / 8)],
        max_iterations: 5,
        language: Language::Python,
    };
    compile_trajectory(&spec)
        .into_iter()
        .map(|s| BatchRunSpec {
            sample_id: s.record.id.clone(),
            input: RunInput::NlPrompt(s.record.nl_prompt.clone()),
            script: Some(s.script),
            language: Some(s.record.target_language),
        })
        .collect()
}

fn bench_batch(c: &mut Criterion) {
    let config = RunConfig::new(Language::Python);
    let forge = PromptForge::builtin();
    let adaptive = AdaptiveStore::builtin();
    let profile = AnalyzerProfile::offline();
    let catalog = PromptForge::builtin_top25_catalog();
    let specs = specs(60);

    let mut group = c.benchmark_group("batch_60_samples");
    group.sample_size(10);

    group.bench_function("sequential", |b| {
        b.iter_with_setup(TempDir::new, |dir| {
            let dir = dir.expect("tempdir");
            let store = RunStore::open(dir.path()).expect("store");
            let ctx = BatchContext {
                config: &config,
                forge: &forge,
                adaptive: &adaptive,
                catalog,
                analyzer_profile: &profile,
                live_provider: None,
                store: &store,
                command_label: "bench",
            };
            run_batch_sequential(&specs, &ctx).expect("batch");
        })
    });

    for jobs in [2usize, 4] {
        group.bench_with_input(BenchmarkId::new("parallel", jobs), &jobs, |b, &jobs| {
            b.iter_with_setup(TempDir::new, |dir| {
                let dir = dir.expect("tempdir");
                let store = RunStore::open(dir.path()).expect("store");
                let ctx = BatchContext {
                    config: &config,
                    forge: &forge,
                    adaptive: &adaptive,
                    catalog,
                    analyzer_profile: &profile,
                    live_provider: None,
                    store: &store,
                    command_label: "bench",
                };
                run_batch(&specs, &ctx, jobs).expect("batch");
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_batch);
criterion_main!(benches);
