//! SARIF 2.1.0 ingestion.
//!
//! Extracts results (rule id, message, physical location) and maps
//! `external/cwe/cwe-NNN` rule tags onto findings. Findings without tags are
//! left with an empty CWE list for the fallback table.

use std::collections::BTreeMap;

use serde::Deserialize;

use super::{AnalyzerFinding, ScanError};
use crate::types::Cwe;

#[derive(Deserialize)]
struct SarifLog {
    #[serde(default)]
    version: Option<String>,
    #[serde(default)]
    runs: Vec<SarifRun>,
}

#[derive(Deserialize)]
struct SarifRun {
    #[serde(default)]
    tool: Option<SarifTool>,
    #[serde(default)]
    results: Vec<SarifResult>,
}

#[derive(Deserialize)]
struct SarifTool {
    #[serde(default)]
    driver: Option<SarifDriver>,
}

#[derive(Deserialize)]
struct SarifDriver {
    #[serde(default)]
    rules: Vec<SarifRule>,
}

#[derive(Deserialize)]
struct SarifRule {
    #[serde(default)]
    id: String,
    #[serde(default)]
    properties: Option<SarifRuleProperties>,
}

#[derive(Deserialize)]
struct SarifRuleProperties {
    #[serde(default)]
    tags: Vec<String>,
}

#[derive(Deserialize)]
struct SarifResult {
    #[serde(rename = "ruleId", default)]
    rule_id: Option<String>,
    #[serde(rename = "ruleIndex", default)]
    rule_index: Option<usize>,
    message: SarifMessage,
    #[serde(default)]
    level: Option<String>,
    #[serde(default)]
    locations: Vec<SarifLocation>,
}

#[derive(Deserialize)]
struct SarifMessage {
    #[serde(default)]
    text: String,
}

#[derive(Deserialize)]
struct SarifLocation {
    #[serde(rename = "physicalLocation", default)]
    physical: Option<SarifPhysicalLocation>,
}

#[derive(Deserialize)]
struct SarifPhysicalLocation {
    #[serde(rename = "artifactLocation", default)]
    artifact: Option<SarifArtifactLocation>,
    #[serde(default)]
    region: Option<SarifRegion>,
}

#[derive(Deserialize)]
struct SarifArtifactLocation {
    #[serde(default)]
    uri: String,
}

#[derive(Deserialize)]
struct SarifRegion {
    #[serde(rename = "startLine", default)]
    start_line: Option<u32>,
    #[serde(rename = "endLine", default)]
    end_line: Option<u32>,
}

fn cwe_from_tag(tag: &str) -> Option<Cwe> {
    let tail = tag.strip_prefix("external/cwe/")?;
    Cwe::parse(tail)
}

/// Parse a SARIF 2.1.0 document into findings.
pub fn parse_sarif(document: &str) -> Result<Vec<AnalyzerFinding>, ScanError> {
    let log: SarifLog =
        serde_json::from_str(document).map_err(|e| ScanError::MalformedSarif(e.to_string()))?;
    if log.version.is_none() {
        return Err(ScanError::MalformedSarif(
            "document carries no SARIF version".to_string(),
        ));
    }
    let mut findings = Vec::new();
    for run in &log.runs {
        // Rule metadata indexed by position and by id.
        let rules: &[SarifRule] = run
            .tool
            .as_ref()
            .and_then(|t| t.driver.as_ref())
            .map(|d| d.rules.as_slice())
            .unwrap_or(&[]);
        let mut tags_by_id: BTreeMap<&str, Vec<Cwe>> = BTreeMap::new();
        for rule in rules {
            let cwes: Vec<Cwe> = rule
                .properties
                .as_ref()
                .map(|p| p.tags.iter().filter_map(|t| cwe_from_tag(t)).collect())
                .unwrap_or_default();
            tags_by_id.insert(rule.id.as_str(), cwes);
        }

        for result in &run.results {
            let rule_id = result
                .rule_id
                .clone()
                .or_else(|| {
                    result
                        .rule_index
                        .and_then(|i| rules.get(i))
                        .map(|r| r.id.clone())
                })
                .unwrap_or_else(|| "unknown-rule".to_string());
            let cwes = tags_by_id
                .get(rule_id.as_str())
                .cloned()
                .unwrap_or_default();
            let (file, start_line, end_line) = result
                .locations
                .first()
                .and_then(|l| l.physical.as_ref())
                .map(|p| {
                    let file = p
                        .artifact
                        .as_ref()
                        .map(|a| a.uri.clone())
                        .unwrap_or_else(|| "<unknown>".to_string());
                    let start = p
                        .region
                        .as_ref()
                        .and_then(|r| r.start_line)
                        .unwrap_or(1)
                        .max(1);
                    let end = p
                        .region
                        .as_ref()
                        .and_then(|r| r.end_line)
                        .unwrap_or(start)
                        .max(start);
                    (file, start, end)
                })
                .unwrap_or_else(|| ("<unknown>".to_string(), 1, 1));
            let message = if result.message.text.is_empty() {
                format!("finding from rule {rule_id}")
            } else {
                result.message.text.clone()
            };
            findings.push(AnalyzerFinding {
                rule_id,
                cwes,
                message,
                file,
                start_line,
                end_line,
                severity: result
                    .level
                    .clone()
                    .unwrap_or_else(|| "warning".to_string()),
            });
        }
    }
    Ok(findings)
}
