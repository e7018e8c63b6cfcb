//! Append-only persistence of run events.
//!
//! One JSONL file per run plus a batch manifest: human-greppable, diff-able,
//! no database dependency. Every entry carries a monotone sequence number and
//! a SHA-256 digest of its payload; code snapshots are stored as full source,
//! never diffs. Secrets are never logged — auth material is referenced by
//! environment-variable name only.
//!
//! Layout under the store root:
//!
//! ```text
//! runs/<run_id>/log.jsonl
//! runs/<run_id>/snapshots/<seq>.<ext>
//! runs/manifest.jsonl
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crosschecker::{AnalyzerReport, ScanError};
use crate::digest_hex;
use crate::orchestrator::{RunConfig, Stage, TerminationKind};
use crate::scorekeeper::ScoreEvent;
use crate::types::Language;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("run {0} is closed")]
    RunClosed(String),
    #[error("log corrupt: {0}")]
    LogCorrupt(String),
    #[error("unknown run {0}")]
    UnknownRun(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Storage(e.to_string())
    }
}

/// Kind-specific body of a log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body")]
pub enum EventPayload {
    Transition {
        from: Option<Stage>,
        to: Stage,
        iteration: u32,
        escalation_level: u32,
    },
    ModelCall {
        template: Option<String>,
        request_text: String,
        reply_text: String,
        request_digest: String,
        reply_digest: String,
        temperature: f64,
        retries: u32,
        estimated_tokens: usize,
        truncated_reports: usize,
    },
    ParseResult {
        parser: String,
        outcome: String,
        detail: serde_json::Value,
    },
    AnalyzerScan {
        outcome: Result<AnalyzerReport, ScanError>,
        dropped_findings: usize,
    },
    ScoreEvent {
        iteration: u32,
        events: Vec<ScoreEvent>,
        current_after: i64,
    },
    CodeSnapshot {
        version: u32,
        language: Language,
        lineage: String,
        source: String,
        source_digest: String,
    },
    Termination {
        kind: TerminationKind,
        detail: String,
        final_code_digest: Option<String>,
        iterations_used: u32,
        escalation_level: u32,
    },
}

impl EventPayload {
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("payload serialization");
        digest_hex(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogEntry {
    pub run_id: String,
    pub sequence: u64,
    pub timestamp_ms: u64,
    #[serde(flatten)]
    pub payload: EventPayload,
    pub payload_digest: String,
}

/// One row per run in the batch manifest; echoes the effective config so a
/// run can be replayed byte-for-byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub run_id: String,
    pub command: String,
    pub started_at_ms: u64,
    pub sample_id: Option<String>,
    pub nl_prompt: Option<String>,
    pub config: RunConfig,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

enum Backing {
    File {
        log: BufWriter<File>,
        run_dir: PathBuf,
    },
    Memory(Vec<RunLogEntry>),
}

/// Single-writer handle for one run's log.
pub struct RunWriter {
    run_id: String,
    sequence: u64,
    closed: bool,
    backing: Backing,
}

impl RunWriter {
    /// In-memory writer, used by tests and replay.
    pub fn memory(run_id: &str) -> Self {
        RunWriter {
            run_id: run_id.to_string(),
            sequence: 0,
            closed: false,
            backing: Backing::Memory(Vec::new()),
        }
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    /// Append one event. The entry is durable (written and flushed) before
    /// this returns. Appending after a Termination event is an error.
    pub fn append(&mut self, payload: EventPayload) -> Result<u64, StoreError> {
        if self.closed {
            return Err(StoreError::RunClosed(self.run_id.clone()));
        }
        let terminal = matches!(payload, EventPayload::Termination { .. });
        let entry = RunLogEntry {
            run_id: self.run_id.clone(),
            sequence: self.sequence,
            timestamp_ms: now_ms(),
            payload_digest: payload.digest(),
            payload,
        };
        match &mut self.backing {
            Backing::File { log, run_dir } => {
                if let EventPayload::CodeSnapshot {
                    language, source, ..
                } = &entry.payload
                {
                    let snap_dir = run_dir.join("snapshots");
                    fs::create_dir_all(&snap_dir)?;
                    let snap_path =
                        snap_dir.join(format!("{}.{}", entry.sequence, language.extension()));
                    fs::write(snap_path, source)?;
                }
                let line = serde_json::to_string(&entry)
                    .map_err(|e| StoreError::Storage(e.to_string()))?;
                log.write_all(line.as_bytes())?;
                log.write_all(b"\n")?;
                log.flush()?;
            }
            Backing::Memory(entries) => entries.push(entry),
        }
        let seq = self.sequence;
        self.sequence += 1;
        if terminal {
            self.closed = true;
        }
        Ok(seq)
    }

    /// Entries recorded so far (memory backing only).
    pub fn entries(&self) -> &[RunLogEntry] {
        match &self.backing {
            Backing::Memory(entries) => entries,
            Backing::File { .. } => &[],
        }
    }
}

/// Root handle over the run directory tree.
#[derive(Clone)]
pub struct RunStore {
    root: PathBuf,
    manifest_lock: Arc<Mutex<()>>,
}

impl RunStore {
    /// Open (creating if needed) a store rooted at `<dir>/runs`.
    pub fn open(output_dir: &Path) -> Result<Self, StoreError> {
        let root = output_dir.join("runs");
        fs::create_dir_all(&root)?;
        Ok(RunStore {
            root,
            manifest_lock: Arc::new(Mutex::new(())),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    /// Create the file-backed writer for a new run.
    pub fn writer(&self, run_id: &str) -> Result<RunWriter, StoreError> {
        let run_dir = self.run_dir(run_id);
        fs::create_dir_all(&run_dir)?;
        let path = run_dir.join("log.jsonl");
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&path)
            .map_err(|e| StoreError::Storage(format!("{}: {e}", path.display())))?;
        Ok(RunWriter {
            run_id: run_id.to_string(),
            sequence: 0,
            closed: false,
            backing: Backing::File {
                log: BufWriter::new(file),
                run_dir,
            },
        })
    }

    /// Read a run log back, verifying sequence monotonicity and payload
    /// digests.
    pub fn read_log(&self, run_id: &str) -> Result<Vec<RunLogEntry>, StoreError> {
        let path = self.run_dir(run_id).join("log.jsonl");
        if !path.exists() {
            return Err(StoreError::UnknownRun(run_id.to_string()));
        }
        let reader = BufReader::new(File::open(&path)?);
        let mut entries = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: RunLogEntry = serde_json::from_str(&line)
                .map_err(|e| StoreError::LogCorrupt(format!("line {}: {e}", idx + 1)))?;
            if entry.sequence != entries.len() as u64 {
                return Err(StoreError::LogCorrupt(format!(
                    "sequence gap at line {}: expected {}, found {}",
                    idx + 1,
                    entries.len(),
                    entry.sequence
                )));
            }
            let expected = entry.payload.digest();
            if entry.payload_digest != expected {
                return Err(StoreError::LogCorrupt(format!(
                    "payload digest mismatch at sequence {}",
                    entry.sequence
                )));
            }
            entries.push(entry);
        }
        Ok(entries)
    }

    pub fn append_manifest(&self, row: &ManifestRow) -> Result<(), StoreError> {
        let _guard = self.manifest_lock.lock().expect("manifest lock");
        let path = self.root.join("manifest.jsonl");
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        let line = serde_json::to_string(row).map_err(|e| StoreError::Storage(e.to_string()))?;
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
        file.flush()?;
        Ok(())
    }

    pub fn read_manifest(&self) -> Result<Vec<ManifestRow>, StoreError> {
        let path = self.root.join("manifest.jsonl");
        if !path.exists() {
            return Ok(Vec::new());
        }
        let reader = BufReader::new(File::open(&path)?);
        let mut rows = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: ManifestRow = serde_json::from_str(&line)
                .map_err(|e| StoreError::LogCorrupt(format!("manifest line {}: {e}", idx + 1)))?;
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn manifest_row_for(&self, run_id: &str) -> Result<ManifestRow, StoreError> {
        self.read_manifest()?
            .into_iter()
            .find(|r| r.run_id == run_id)
            .ok_or_else(|| StoreError::UnknownRun(run_id.to_string()))
    }
}

/// ManifestRow constructor with the current timestamp.
pub fn manifest_row(
    run_id: &str,
    command: &str,
    sample_id: Option<String>,
    nl_prompt: Option<String>,
    config: &RunConfig,
) -> ManifestRow {
    ManifestRow {
        run_id: run_id.to_string(),
        command: command.to_string(),
        started_at_ms: now_ms(),
        sample_id,
        nl_prompt,
        config: config.clone(),
    }
}
