//! Fix-success-rate trajectories, pass@1, and batch reports.
//!
//! FSR at iteration k is the fraction of initially vulnerable samples fixed
//! within k interactive iterations: `(initial - remaining(k)) / initial`.
//! "Remaining vulnerable at iteration k" counts runs not yet secure after k
//! iterations. A batch with nothing to fix reports FSR 1.0 (flagged in
//! output). Printed numbers are formatted exactly once, so the text, JSON,
//! and CSV mirrors can never disagree by rounding.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::TerminationKind;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("iteration I{0} was not recorded in this ledger")]
    UnknownIteration(u32),
}

/// Whether "initially vulnerable" was measured after generation (the first
/// identification) or taken from dataset ground truth (fix-only runs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VulnerableBasis {
    AfterGeneration,
    GroundTruth,
}

impl VulnerableBasis {
    fn label(self) -> &'static str {
        match self {
            VulnerableBasis::AfterGeneration => "after-generation",
            VulnerableBasis::GroundTruth => "ground-truth",
        }
    }
}

/// Per-run summary fed into the batch ledger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub sample_id: String,
    pub run_id: String,
    pub initially_vulnerable: bool,
    /// Iteration count at which the run reached SecureConfirmed.
    pub secure_at: Option<u32>,
    pub termination: TerminationKind,
    pub iterations_used: u32,
}

impl RunRecord {
    fn still_vulnerable_after(&self, iteration: u32) -> bool {
        if !self.initially_vulnerable {
            return false;
        }
        match self.secure_at {
            Some(k) => k > iteration,
            None => true,
        }
    }
}

/// Batch accounting: remaining-vulnerable counts per iteration plus the raw
/// per-run outcomes they were computed from (the two-path check).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchLedger {
    pub configuration: String,
    pub basis: VulnerableBasis,
    pub total_samples: u32,
    pub initially_vulnerable: u32,
    pub remaining_by_iteration: BTreeMap<u32, u32>,
    pub runs: Vec<RunRecord>,
}

impl BatchLedger {
    pub fn from_runs(
        runs: Vec<RunRecord>,
        basis: VulnerableBasis,
        configuration: impl Into<String>,
        max_iterations: u32,
    ) -> Self {
        let total_samples = runs.len() as u32;
        let initially_vulnerable = runs.iter().filter(|r| r.initially_vulnerable).count() as u32;
        let mut remaining_by_iteration = BTreeMap::new();
        for k in 0..=max_iterations {
            let remaining = runs.iter().filter(|r| r.still_vulnerable_after(k)).count() as u32;
            remaining_by_iteration.insert(k, remaining);
        }
        BatchLedger {
            configuration: configuration.into(),
            basis,
            total_samples,
            initially_vulnerable,
            remaining_by_iteration,
            runs,
        }
    }

    pub fn remaining(&self, iteration: u32) -> Result<u32, MetricsError> {
        self.remaining_by_iteration
            .get(&iteration)
            .copied()
            .ok_or(MetricsError::UnknownIteration(iteration))
    }

    /// Fix success rate after `iteration` interactive iterations.
    pub fn fsr(&self, iteration: u32) -> Result<f64, MetricsError> {
        let remaining = self.remaining(iteration)?;
        if self.initially_vulnerable == 0 {
            // Nothing to fix counts as full success.
            return Ok(1.0);
        }
        Ok(f64::from(self.initially_vulnerable - remaining) / f64::from(self.initially_vulnerable))
    }

    /// Recompute remaining(k) from the raw run records, bypassing the stored
    /// map. Used by the two-path consistency check.
    pub fn recompute_remaining(&self, iteration: u32) -> u32 {
        self.runs
            .iter()
            .filter(|r| r.still_vulnerable_after(iteration))
            .count() as u32
    }
}

/// Fraction of samples passing their functional test. `None` when there are
/// no samples (reported as absent, not zero).
pub fn pass_at_1(outcomes: &[bool]) -> Option<f64> {
    if outcomes.is_empty() {
        return None;
    }
    let passed = outcomes.iter().filter(|&&p| p).count();
    Some(passed as f64 / outcomes.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PassResult {
    pub sample_id: String,
    pub passed: bool,
    pub exit_code: Option<i32>,
}

/// Run a user-supplied functional test command once per sample, substituting
/// `{code}` with the sample's code path. Exit status 0 counts as a pass.
pub fn pass_at_1_hook(
    samples: &[(String, std::path::PathBuf)],
    command_template: &str,
) -> Vec<PassResult> {
    samples
        .iter()
        .map(|(sample_id, code_path)| {
            let command = command_template.replace("{code}", &code_path.display().to_string());
            let status = Command::new("sh").arg("-c").arg(&command).status();
            let exit_code = status.ok().and_then(|s| s.code());
            PassResult {
                sample_id: sample_id.clone(),
                passed: exit_code == Some(0),
                exit_code,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    TableText,
    Json,
    Csv,
}

impl ReportFormat {
    pub fn parse(text: &str) -> Option<ReportFormat> {
        match text.trim().to_ascii_lowercase().as_str() {
            "table" | "table-text" | "text" => Some(ReportFormat::TableText),
            "json" => Some(ReportFormat::Json),
            "csv" => Some(ReportFormat::Csv),
            _ => None,
        }
    }
}

fn fsr_text(ledger: &BatchLedger, iteration: u32) -> String {
    match ledger.fsr(iteration) {
        Ok(v) => format!("{v:.4}"),
        Err(_) => "-".to_string(),
    }
}

/// Render the ledger in one of the three mirror formats. Deterministic; all
/// formats print the same numbers.
pub fn render_report(ledger: &BatchLedger, format: ReportFormat) -> String {
    let iterations: Vec<u32> = ledger
        .remaining_by_iteration
        .keys()
        .copied()
        .filter(|&k| k > 0)
        .collect();
    match format {
        ReportFormat::TableText => {
            let mut out = String::new();
            out.push_str(&format!("configuration: {}\n", ledger.configuration));
            out.push_str(&format!("basis: {}\n", ledger.basis.label()));
            out.push_str(&format!("total samples: {}\n", ledger.total_samples));
            out.push_str(&format!(
                "initially vulnerable: {}/{}\n",
                ledger.initially_vulnerable, ledger.total_samples
            ));
            if ledger.initially_vulnerable == 0 {
                out.push_str("note: no initially vulnerable samples; FSR defined as 1.0\n");
            }
            out.push('\n');
            out.push_str("iteration | remaining | fsr\n");
            for k in &iterations {
                out.push_str(&format!(
                    "I{:<8} | {:>9} | {}\n",
                    k,
                    ledger.remaining(*k).unwrap_or(0),
                    fsr_text(ledger, *k)
                ));
            }
            out
        }
        ReportFormat::Json => {
            let rows: Vec<serde_json::Value> = iterations
                .iter()
                .map(|&k| {
                    serde_json::json!({
                        "iteration": k,
                        "remaining": ledger.remaining(k).unwrap_or(0),
                        "fsr": fsr_text(ledger, k).parse::<f64>().ok(),
                    })
                })
                .collect();
            let doc = serde_json::json!({
                "configuration": ledger.configuration,
                "basis": ledger.basis.label(),
                "total_samples": ledger.total_samples,
                "initially_vulnerable": ledger.initially_vulnerable,
                "zero_denominator": ledger.initially_vulnerable == 0,
                "iterations": rows,
            });
            serde_json::to_string_pretty(&doc).expect("report serialization")
        }
        ReportFormat::Csv => {
            let mut out = String::from("iteration,remaining,fsr\n");
            for k in &iterations {
                out.push_str(&format!(
                    "{},{},{}\n",
                    k,
                    ledger.remaining(*k).unwrap_or(0),
                    fsr_text(ledger, *k)
                ));
            }
            out
        }
    }
}

/// Write the ledger and all three report mirrors under `dir`.
pub fn write_reports(ledger: &BatchLedger, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("ledger.json"),
        serde_json::to_string_pretty(ledger).expect("ledger serialization"),
    )?;
    std::fs::write(
        dir.join("report.txt"),
        render_report(ledger, ReportFormat::TableText),
    )?;
    std::fs::write(
        dir.join("report.json"),
        render_report(ledger, ReportFormat::Json),
    )?;
    std::fs::write(
        dir.join("report.csv"),
        render_report(ledger, ReportFormat::Csv),
    )?;
    Ok(())
}
