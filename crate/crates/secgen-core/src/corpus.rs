//! NL-prompt dataset loading, deduplication, and summaries.
//!
//! The canonical interchange format is JSONL with the exact field names
//! `id, nl_prompt, target_language, source, ground_truth_cwes,
//! ground_truth_code`; CSV with the same header row is accepted for
//! ingestion. Near-duplicate prompts are dropped by token-set Jaccard
//! similarity (default threshold 0.9), keeping the earlier record.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::types::{Cwe, Language};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus file not found: {0}")]
    MissingFile(String),
    #[error("corpus contains no usable records ({0} row errors)")]
    EmptyCorpus(usize),
    #[error("io failure: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl CorpusFormat {
    pub fn infer(path: &Path) -> CorpusFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

/// One natural-language programming request, optionally with ground truth
/// for fix-only runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub nl_prompt: String,
    pub target_language: Language,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_cwes: Option<Vec<Cwe>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_code: Option<String>,
}

impl PromptRecord {
    fn check(self) -> Result<Self, String> {
        if self.nl_prompt.trim().is_empty() {
            return Err("nl_prompt is empty".to_string());
        }
        Ok(self)
    }
}

#[derive(Debug, Clone)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct CorpusLoad {
    pub records: Vec<PromptRecord>,
    pub row_errors: Vec<RowError>,
}

/// Load a corpus file. Malformed rows are collected, never silently dropped;
/// a file that yields zero usable records is an error.
pub fn load(path: &Path, format: CorpusFormat) -> Result<CorpusLoad, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::MissingFile(path.display().to_string()));
    }
    let text = fs::read_to_string(path).map_err(|e| CorpusError::Io(e.to_string()))?;
    let load = match format {
        CorpusFormat::Jsonl => load_jsonl(&text),
        CorpusFormat::Csv => load_csv(&text),
    };
    if load.records.is_empty() {
        return Err(CorpusError::EmptyCorpus(load.row_errors.len()));
    }
    Ok(load)
}

fn load_jsonl(text: &str) -> CorpusLoad {
    let mut records = Vec::new();
    let mut row_errors = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PromptRecord>(line).map_err(|e| e.to_string()) {
            Ok(record) => match record.check() {
                Ok(r) => records.push(r),
                Err(message) => row_errors.push(RowError {
                    line: idx + 1,
                    message,
                }),
            },
            Err(message) => row_errors.push(RowError {
                line: idx + 1,
                message,
            }),
        }
    }
    CorpusLoad {
        records,
        row_errors,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    id: String,
    nl_prompt: String,
    target_language: String,
    source: String,
    #[serde(default)]
    ground_truth_cwes: String,
    #[serde(default)]
    ground_truth_code: String,
}

fn load_csv(text: &str) -> CorpusLoad {
    let mut records = Vec::new();
    let mut row_errors = Vec::new();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    for (idx, row) in reader.deserialize::<CsvRow>().enumerate() {
        let line = idx + 2; // header is line 1
        match row {
            Ok(row) => match csv_row_to_record(row) {
                Ok(record) => records.push(record),
                Err(message) => row_errors.push(RowError { line, message }),
            },
            Err(e) => row_errors.push(RowError {
                line,
                message: e.to_string(),
            }),
        }
    }
    CorpusLoad {
        records,
        row_errors,
    }
}

fn csv_row_to_record(row: CsvRow) -> Result<PromptRecord, String> {
    let target_language = Language::parse(&row.target_language)
        .ok_or_else(|| format!("unknown target_language {:?}", row.target_language))?;
    let ground_truth_cwes = if row.ground_truth_cwes.trim().is_empty() {
        None
    } else {
        let cwes: Vec<Cwe> = row
            .ground_truth_cwes
            .split(';')
            .filter_map(|t| Cwe::parse(t.trim()))
            .collect();
        if cwes.is_empty() {
            return Err(format!(
                "unparseable ground_truth_cwes {:?}",
                row.ground_truth_cwes
            ));
        }
        Some(cwes)
    };
    let ground_truth_code = if row.ground_truth_code.is_empty() {
        None
    } else {
        Some(row.ground_truth_code)
    };
    PromptRecord {
        id: row.id,
        nl_prompt: row.nl_prompt,
        target_language,
        source: row.source,
        ground_truth_cwes,
        ground_truth_code,
    }
    .check()
}

/// Save records to a corpus file. JSONL is canonical; CSV mirrors the same
/// columns for tooling that wants a spreadsheet.
pub fn save(
    records: &[PromptRecord],
    path: &Path,
    format: CorpusFormat,
) -> Result<(), CorpusError> {
    let text = match format {
        CorpusFormat::Jsonl => {
            let mut out = String::new();
            for record in records {
                out.push_str(
                    &serde_json::to_string(record).map_err(|e| CorpusError::Io(e.to_string()))?,
                );
                out.push('\n');
            }
            out
        }
        CorpusFormat::Csv => {
            let mut writer = csv::Writer::from_writer(Vec::new());
            for record in records {
                let row = CsvRow {
                    id: record.id.clone(),
                    nl_prompt: record.nl_prompt.clone(),
                    target_language: record.target_language.fence_tag().to_string(),
                    source: record.source.clone(),
                    ground_truth_cwes: record
                        .ground_truth_cwes
                        .as_ref()
                        .map(|cwes| {
                            cwes.iter()
                                .map(|c| c.to_string())
                                .collect::<Vec<_>>()
                                .join(";")
                        })
                        .unwrap_or_default(),
                    ground_truth_code: record.ground_truth_code.clone().unwrap_or_default(),
                };
                writer
                    .serialize(row)
                    .map_err(|e| CorpusError::Io(e.to_string()))?;
            }
            String::from_utf8(
                writer
                    .into_inner()
                    .map_err(|e| CorpusError::Io(e.to_string()))?,
            )
            .map_err(|e| CorpusError::Io(e.to_string()))?
        }
    };
    fs::write(path, text).map_err(|e| CorpusError::Io(e.to_string()))
}

/// Lowercased alphanumeric token set.
fn token_set(text: &str) -> BTreeSet<String> {
    let mut tokens = BTreeSet::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_ascii_alphanumeric() {
            current.push(c.to_ascii_lowercase());
        } else if !current.is_empty() {
            tokens.insert(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.insert(current);
    }
    tokens
}

/// Token-set Jaccard similarity of two prompts.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let sa = token_set(a);
    let sb = token_set(b);
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let intersection = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    intersection as f64 / union as f64
}

#[derive(Debug, Clone)]
pub struct DuplicateRemoval {
    pub removed: PromptRecord,
    pub duplicate_of: String,
    pub similarity: f64,
}

#[derive(Debug, Clone)]
pub struct DedupeOutcome {
    pub kept: Vec<PromptRecord>,
    pub removed: Vec<DuplicateRemoval>,
}

/// Drop records whose prompt is near-identical (Jaccard >= threshold) to an
/// earlier record. Order of kept records is stable; removal pairs are
/// returned and logged.
pub fn dedupe(records: Vec<PromptRecord>, threshold: f64) -> DedupeOutcome {
    let mut kept: Vec<PromptRecord> = Vec::with_capacity(records.len());
    let mut removed = Vec::new();
    for record in records {
        let duplicate = kept
            .iter()
            .map(|k| (k.id.clone(), jaccard(&k.nl_prompt, &record.nl_prompt)))
            .find(|(_, sim)| *sim >= threshold);
        match duplicate {
            Some((duplicate_of, similarity)) => {
                debug!(
                    removed = %record.id,
                    kept = %duplicate_of,
                    similarity,
                    "dropping near-duplicate prompt"
                );
                removed.push(DuplicateRemoval {
                    removed: record,
                    duplicate_of,
                    similarity,
                });
            }
            None => kept.push(record),
        }
    }
    DedupeOutcome { kept, removed }
}

/// Per-dataset and per-language counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub total: usize,
    pub per_dataset: BTreeMap<String, usize>,
    pub per_language: BTreeMap<String, usize>,
    pub duplicates_removed: usize,
}

pub fn summarize(records: &[PromptRecord]) -> CorpusSummary {
    let mut summary = CorpusSummary {
        total: records.len(),
        ..Default::default()
    };
    for record in records {
        *summary
            .per_dataset
            .entry(record.source.clone())
            .or_insert(0) += 1;
        *summary
            .per_language
            .entry(record.target_language.display_name().to_string())
            .or_insert(0) += 1;
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, prompt: &str, language: Language) -> PromptRecord {
        PromptRecord {
            id: id.to_string(),
            nl_prompt: prompt.to_string(),
            target_language: language,
            source: "unit".to_string(),
            ground_truth_cwes: None,
            ground_truth_code: None,
        }
    }

    #[test]
    fn jsonl_load_counts_rows_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let text = concat!(
            r#"{"id":"a","nl_prompt":"Write C code to parse ini files","target_language":"c","source":"unit"}"#,
            "\n",
            r#"{"id":"b","nl_prompt":"","target_language":"c","source":"unit"}"#,
            "\n",
            r#"{"id":"c","nl_prompt":"Write Python code to hash passwords","target_language":"python","source":"unit"}"#,
            "\n",
            r#"{"id":"d","nl_prompt":"Write C code to list directories","target_language":"c","source":"unit"}"#,
            "\n",
        );
        std::fs::write(&path, text).unwrap();
        let load = load(&path, CorpusFormat::Jsonl).unwrap();
        assert_eq!(load.records.len(), 3);
        assert_eq!(load.row_errors.len(), 1);
        assert_eq!(load.row_errors[0].line, 2);
    }

    #[test]
    fn missing_file_is_distinguished() {
        assert!(matches!(
            load(Path::new("/nonexistent/corpus.jsonl"), CorpusFormat::Jsonl),
            Err(CorpusError::MissingFile(_))
        ));
    }

    #[test]
    fn identical_prompts_dedupe_to_one() {
        let records = vec![
            record("a", "Write C code to process files", Language::C),
            record("b", "Write C code to process files", Language::C),
        ];
        let outcome = dedupe(records, 0.9);
        assert_eq!(outcome.kept.len(), 1);
        assert_eq!(outcome.removed.len(), 1);
        assert_eq!(outcome.removed[0].duplicate_of, "a");
    }

    #[test]
    fn jaccard_matches_hand_computation() {
        // {write,c,code,to,process,files} vs {implement,c,code,to,process,files}
        // intersection 5, union 7.
        let a = "Write C code to process files";
        let b = "Implement C code to process files";
        let sim = jaccard(a, b);
        assert!((sim - 5.0 / 7.0).abs() < 1e-12, "sim = {sim}");
        // Below the 0.9 threshold: both records stay.
        let outcome = dedupe(
            vec![record("a", a, Language::C), record("b", b, Language::C)],
            0.9,
        );
        assert_eq!(outcome.kept.len(), 2);
    }

    #[test]
    fn disjoint_prompts_all_kept() {
        let records = vec![
            record("a", "Write C code to compute checksums", Language::C),
            record("b", "Build a Python HTTP client", Language::Python),
            record("c", "Sort integers in C using qsort", Language::C),
        ];
        let outcome = dedupe(records, 0.9);
        assert_eq!(outcome.kept.len(), 3);
        assert!(outcome.removed.is_empty());
    }

    #[test]
    fn dedupe_is_idempotent() {
        let records = vec![
            record("a", "Write C code to process files", Language::C),
            record("b", "Write C code to process files quickly", Language::C),
            record("c", "Generate a Python web server", Language::Python),
        ];
        let first = dedupe(records, 0.8);
        let second = dedupe(first.kept.clone(), 0.8);
        assert_eq!(first.kept, second.kept);
        assert!(second.removed.is_empty());
    }

    #[test]
    fn summarize_counts_are_consistent() {
        let records = vec![
            record("a", "one prompt", Language::C),
            record("b", "two prompt", Language::C),
            record("c", "three prompt", Language::Python),
            record("d", "four prompt", Language::Cpp),
            record("e", "five prompt", Language::Python),
        ];
        let summary = summarize(&records);
        assert_eq!(summary.total, 5);
        assert_eq!(summary.per_language["C"], 2);
        assert_eq!(summary.per_language["Python"], 2);
        assert_eq!(summary.per_language["C++"], 1);
        assert_eq!(summary.per_dataset["unit"], 5);
        let total: usize = summary.per_language.values().sum();
        assert_eq!(total, records.len());
        assert_eq!(summarize(&[]).total, 0);
    }
}
