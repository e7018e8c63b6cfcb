//! Scripted mock scenarios for hermetic batch evaluation.
//!
//! A scenario file maps sample ids to canned reply sequences for the mock
//! provider. The trajectory compiler turns a remaining-vulnerable curve
//! (e.g. 73 initially vulnerable, 35 left after I1, 17 after I2, 6 after I5)
//! into one scripted sample per run: clean samples, samples fixed at a
//! chosen iteration, and stubborn samples that exhaust the budget.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::PromptRecord;
use crate::types::Language;

/// Canned replies for one run, consumed in order by the mock provider.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub replies: Vec<String>,
}

/// Scenario file layout for batch runs: per-sample scripts plus an optional
/// default for samples without one.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BatchScenario {
    #[serde(default)]
    pub default: Option<ScenarioScript>,
    #[serde(default)]
    pub samples: BTreeMap<String, ScenarioScript>,
}

impl BatchScenario {
    pub fn script_for(&self, sample_id: &str) -> Option<&ScenarioScript> {
        self.samples.get(sample_id).or(self.default.as_ref())
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialization")
    }
}

/// A remaining-vulnerable trajectory over a batch.
#[derive(Debug, Clone)]
pub struct TrajectorySpec {
    pub total: u32,
    pub initially_vulnerable: u32,
    /// Known (iteration, remaining) anchors, e.g. [(1, 35), (2, 17), (5, 6)].
    /// Iterations between anchors are interpolated non-increasingly; samples
    /// still vulnerable after the last anchor never get fixed.
    pub anchors: Vec<(u32, u32)>,
    pub max_iterations: u32,
    pub language: Language,
}

/// One compiled sample: the prompt record plus its scripted replies.
#[derive(Debug, Clone)]
pub struct CompiledSample {
    pub record: PromptRecord,
    pub script: ScenarioScript,
    /// Iteration at which the run becomes secure; `None` for stubborn
    /// samples that exhaust the budget.
    pub secure_at: Option<u32>,
}

/// Expand anchors into a full remaining-per-iteration curve.
fn remaining_curve(spec: &TrajectorySpec) -> Vec<u32> {
    let mut curve = vec![spec.initially_vulnerable; (spec.max_iterations + 1) as usize];
    let mut anchors = spec.anchors.clone();
    anchors.sort_by_key(|&(k, _)| k);
    let mut prev = (0u32, spec.initially_vulnerable);
    for &(k, remaining) in &anchors {
        let k = k.min(spec.max_iterations);
        let span = k.saturating_sub(prev.0);
        if span > 0 {
            let total_drop = prev.1.saturating_sub(remaining);
            for step in 1..=span {
                let dropped = (u64::from(total_drop) * u64::from(step) / u64::from(span)) as u32;
                curve[(prev.0 + step) as usize] = prev.1 - dropped;
            }
        }
        prev = (k, remaining);
    }
    for k in (prev.0 + 1)..=spec.max_iterations {
        curve[k as usize] = prev.1;
    }
    curve
}

/// Compile a trajectory into scripted samples whose batch ledger reproduces
/// the requested remaining-vulnerable curve exactly.
pub fn compile_trajectory(spec: &TrajectorySpec) -> Vec<CompiledSample> {
    assert!(spec.initially_vulnerable <= spec.total);
    let curve = remaining_curve(spec);
    let mut samples = Vec::with_capacity(spec.total as usize);

    let clean_count = spec.total - spec.initially_vulnerable;
    for i in 0..clean_count {
        let id = format!("sample-clean-{i:03}");
        samples.push(CompiledSample {
            record: prompt_record(&id, spec.language, i),
            script: clean_script(spec.language),
            secure_at: Some(0),
        });
    }

    let mut n = 0u32;
    for k in 1..=spec.max_iterations {
        let fixed_here = curve[(k - 1) as usize].saturating_sub(curve[k as usize]);
        for _ in 0..fixed_here {
            let id = format!("sample-vuln-{n:03}");
            samples.push(CompiledSample {
                record: prompt_record(&id, spec.language, n),
                script: fixed_at_script(spec.language, k),
                secure_at: Some(k),
            });
            n += 1;
        }
    }
    let stubborn = curve[spec.max_iterations as usize];
    for _ in 0..stubborn {
        let id = format!("sample-vuln-{n:03}");
        samples.push(CompiledSample {
            record: prompt_record(&id, spec.language, n),
            script: stubborn_script(spec.language, spec.max_iterations),
            secure_at: None,
        });
        n += 1;
    }
    samples
}

fn prompt_record(id: &str, language: Language, seed: u32) -> PromptRecord {
    let tasks = [
        "process file contents, calculate checksums, and save relevant information based on the checksum result",
        "read a configuration file and report malformed entries",
        "accept a list of integers and compute their running average",
        "count word frequencies in a text document",
        "copy a file while verifying its length",
        "parse key=value lines from standard input",
        "summarize byte histograms for a binary file",
        "validate dates supplied as command-line arguments",
    ];
    let task = tasks[(seed as usize) % tasks.len()];
    PromptRecord {
        id: id.to_string(),
        nl_prompt: format!(
            "Write {} code to {} (variant {}).",
            language.display_name(),
            task,
            seed
        ),
        target_language: language,
        source: "scripted".to_string(),
        ground_truth_cwes: None,
        ground_truth_code: None,
    }
}

/// Program with none of the offline analyzer's patterns. Kept free of the
/// substring "point" so encouragement-ablation checks can grep rendered
/// prompts wholesale.
pub fn benign_code(language: Language) -> String {
    match language {
        Language::Python => concat!(
            "def file_checksum(path):\n",
            "    total = 0\n",
            "    with open(path, 'rb') as handle:\n",
            "        for chunk in iter(lambda: handle.read(4096), b''):\n",
            "            for value in chunk:\n",
            "                total = (total + value) % 65536\n",
            "    return total\n",
            "\n",
            "def main():\n",
            "    print(file_checksum('data.bin'))\n",
            "\n",
            "if __name__ == '__main__':\n",
            "    main()\n",
        )
        .to_string(),
        Language::C | Language::Cpp => concat!(
            "#include <stdio.h>\n",
            "#include <stdlib.h>\n",
            "#include <string.h>\n",
            "\n",
            "int main(void) {\n",
            "    unsigned int total = 0;\n",
            "    int c;\n",
            "    while ((c = getchar()) != EOF) {\n",
            "        total = (total + (unsigned int)c) % 65536u;\n",
            "    }\n",
            "    printf(\"%u\\n\", total);\n",
            "    return 0;\n",
            "}\n",
        )
        .to_string(),
    }
}

fn gen_reply(language: Language) -> String {
    format!(
        "Here is the requested program.\n```{}\n{}```\n",
        language.fence_tag(),
        benign_code(language)
    )
}

fn identify_vulnerable_reply() -> String {
    concat!(
        "1. CWE-20: Improper Input Validation\n",
        "Address: total = (total + value) % 65536\n",
        "Justification: The checksum routine consumes bytes without validating the source path.\n",
        "Response: Validate the path before reading and reject unexpected input.\n",
    )
    .to_string()
}

fn fix_reply(language: Language) -> String {
    format!(
        "Addressed the reported issue.\n```{}\n{}```\nFixed version | Original Score: 0 | Updated Score: 1 | List of Fixed Vulnerabilities & CWE ID: CWE-20 validated the input\n",
        language.fence_tag(),
        benign_code(language)
    )
}

/// Clean from the start: generate, declare clean, pass the cross-check.
pub fn clean_script(language: Language) -> ScenarioScript {
    ScenarioScript {
        replies: vec![gen_reply(language), "no vulnerabilities".to_string()],
    }
}

/// Vulnerable until fix round `k` succeeds, then clean.
pub fn fixed_at_script(language: Language, k: u32) -> ScenarioScript {
    let mut replies = vec![gen_reply(language)];
    for _ in 0..k {
        replies.push(identify_vulnerable_reply());
        replies.push(fix_reply(language));
    }
    replies.push("no vulnerabilities".to_string());
    ScenarioScript { replies }
}

/// Never fixed: every identification keeps finding the weakness until the
/// budget runs out.
pub fn stubborn_script(language: Language, max_iterations: u32) -> ScenarioScript {
    let mut replies = vec![gen_reply(language)];
    for _ in 0..max_iterations {
        replies.push(identify_vulnerable_reply());
        replies.push(fix_reply(language));
    }
    replies.push(identify_vulnerable_reply());
    ScenarioScript { replies }
}
