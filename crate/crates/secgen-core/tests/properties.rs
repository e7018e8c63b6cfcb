//! Property suites: embed/extract round-trips, parser totality, corpus
//! round-trips, and dedupe idempotence.

use proptest::prelude::*;

use secgen_core::corpus::{self, CorpusFormat, PromptRecord};
use secgen_core::prompt_forge::{PromptForge, RenderContext, TemplateId};
use secgen_core::response_parser::{extract_code, parse_identification, IdentificationOutcome};
use secgen_core::types::{CodeArtifact, Cwe, Language};

fn code_line() -> impl Strategy<Value = String> {
    // Printable ASCII lines that cannot open or close a fence.
    "[ -~]{0,60}".prop_filter("no fence markers", |s| !s.trim_start().starts_with("```"))
}

fn code_source() -> impl Strategy<Value = String> {
    (proptest::collection::vec(code_line(), 1..25), any::<bool>()).prop_map(
        |(lines, trailing_newline)| {
            let mut source = lines.join("\n");
            if trailing_newline {
                source.push('\n');
            }
            if source.is_empty() {
                source.push(' ');
            }
            source
        },
    )
}

fn language() -> impl Strategy<Value = Language> {
    prop_oneof![
        Just(Language::C),
        Just(Language::Cpp),
        Just(Language::Python)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    /// Embedding code in a prompt and re-extracting it is byte-exact.
    #[test]
    fn prompt_embed_extract_round_trip(source in code_source(), lang in language()) {
        let forge = PromptForge::builtin();
        let artifact = CodeArtifact::new(lang, source.clone(), "prop");
        let ctx = RenderContext::for_code(artifact);
        let rendered = forge.render(TemplateId::IdentifyP2, &ctx).unwrap();
        let extracted = extract_code(&rendered.user, lang).unwrap();
        prop_assert_eq!(extracted.source, source);
    }

    /// CWE ids survive a display/parse cycle in every spelling variant.
    #[test]
    fn cwe_display_parse_round_trip(n in 1u16..=9999) {
        let cwe = Cwe(n);
        prop_assert_eq!(Cwe::parse(&cwe.to_string()), Some(cwe));
        prop_assert_eq!(Cwe::parse(&format!("cwe-{n}")), Some(cwe));
        prop_assert_eq!(Cwe::parse(&format!("CWE {n}")), Some(cwe));
        prop_assert_eq!(Cwe::parse(&format!("CWE-{n}:")), Some(cwe));
    }

    /// The identification parser never panics, and every report's span lies
    /// within the reply.
    #[test]
    fn identification_spans_stay_in_bounds(reply in "[ -~\n]{1,400}") {
        match parse_identification(&reply) {
            Ok(IdentificationOutcome::Vulnerable { reports, .. }) => {
                for report in reports {
                    prop_assert!(report.span.0 <= report.span.1);
                    prop_assert!(report.span.1 <= reply.len());
                    prop_assert!(!report.justification.is_empty());
                }
            }
            Ok(IdentificationOutcome::Clean(_)) | Err(_) => {}
        }
    }
}

fn prompt_text() -> impl Strategy<Value = String> {
    "[a-zA-Z][a-zA-Z0-9 ,._-]{0,70}"
        .prop_map(|s| s.trim().to_string())
        .prop_filter("non-empty", |s| !s.is_empty())
}

fn record_strategy() -> impl Strategy<Value = PromptRecord> {
    (
        "[a-z0-9-]{1,12}",
        prompt_text(),
        language(),
        "[A-Za-z]{1,8}",
        proptest::option::of(proptest::collection::vec(1u16..2000, 1..4)),
        proptest::option::of("[ -~]{1,60}"),
    )
        .prop_map(|(id, nl_prompt, lang, source, cwes, code)| PromptRecord {
            id,
            nl_prompt,
            target_language: lang,
            source,
            ground_truth_cwes: cwes.map(|v| v.into_iter().map(Cwe).collect()),
            ground_truth_code: code,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// save ∘ load is the identity for both interchange formats.
    #[test]
    fn corpus_round_trips_both_formats(records in proptest::collection::vec(record_strategy(), 1..12)) {
        let dir = tempfile::tempdir().unwrap();
        for format in [CorpusFormat::Jsonl, CorpusFormat::Csv] {
            let path = dir.path().join(match format {
                CorpusFormat::Jsonl => "roundtrip.jsonl",
                CorpusFormat::Csv => "roundtrip.csv",
            });
            corpus::save(&records, &path, format).unwrap();
            let loaded = corpus::load(&path, format).unwrap();
            prop_assert!(loaded.row_errors.is_empty(), "{:?}", loaded.row_errors);
            prop_assert_eq!(&loaded.records, &records, "format {:?}", format);
        }
    }

    /// Deduplicating an already-deduplicated corpus removes nothing, and the
    /// kept totals match the summary.
    #[test]
    fn dedupe_idempotent_and_summary_consistent(
        records in proptest::collection::vec(record_strategy(), 1..20),
        threshold in 0.5f64..=1.0,
    ) {
        let first = corpus::dedupe(records, threshold);
        let second = corpus::dedupe(first.kept.clone(), threshold);
        prop_assert!(second.removed.is_empty());
        prop_assert_eq!(&second.kept, &first.kept);
        let summary = corpus::summarize(&first.kept);
        prop_assert_eq!(summary.total, first.kept.len());
        let by_lang: usize = summary.per_language.values().sum();
        prop_assert_eq!(by_lang, first.kept.len());
    }
}
