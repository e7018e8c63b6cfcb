//! Config file loading and CLI-override merging.
//!
//! Precedence: command-line flags > config file > built-in defaults. The
//! effective run config is echoed into the run manifest, so every run
//! records exactly what it executed with.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

use secgen_core::crosschecker::AnalyzerProfile;
use secgen_core::model_gateway::{ProviderKind, ProviderProfile};
use secgen_core::orchestrator::RunConfig;
use secgen_core::prompt_forge::FixStrategy;
use secgen_core::types::Language;

/// `[run]` section: every field optional, merged over defaults. The target
/// language is not a config-file concern: it comes from the command line or
/// from each corpus record.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub provider_profile: Option<String>,
    pub max_iterations: Option<u32>,
    pub temperature_initial: Option<f64>,
    pub temperature_step: Option<f64>,
    pub temperature_cap: Option<f64>,
    pub ep_enabled: Option<bool>,
    pub crosscheck_enabled: Option<bool>,
    pub adaptive_enabled: Option<bool>,
    pub escalation_enabled: Option<bool>,
    pub analyzer_profile: Option<String>,
    pub strategy: Option<String>,
    pub findings_cap: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub providers: BTreeMap<String, ProviderProfile>,
    #[serde(default)]
    pub analyzers: BTreeMap<String, AnalyzerProfile>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        match path {
            None => Ok(FileConfig::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                let config: FileConfig = toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?;
                Ok(config)
            }
        }
    }

    /// Resolve a provider profile by name. `mock` is always available.
    pub fn provider(&self, name: &str) -> Result<ProviderProfile> {
        if let Some(profile) = self.providers.get(name) {
            let mut profile = profile.clone();
            profile.name = name.to_string();
            return Ok(profile);
        }
        if name == "mock" {
            return Ok(ProviderProfile::mock("mock"));
        }
        bail!("provider profile {name:?} is not defined in the config file")
    }

    /// Resolve an analyzer profile by name. `offline` is always available.
    pub fn analyzer(&self, name: &str) -> Result<AnalyzerProfile> {
        if let Some(profile) = self.analyzers.get(name) {
            return Ok(profile.clone());
        }
        if name == "offline" {
            return Ok(AnalyzerProfile::offline());
        }
        bail!("analyzer profile {name:?} is not defined in the config file")
    }
}

/// Command-line overrides shared by the run-driving subcommands.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Provider profile name (config file key; `mock` is built in).
    #[arg(long)]
    pub provider: Option<String>,
    /// Model id override for the chosen provider.
    #[arg(long)]
    pub model: Option<String>,
    /// Initial sampling temperature.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Interactive iteration budget per escalation level.
    #[arg(long)]
    pub max_iterations: Option<u32>,
    /// Disable encouragement (reward/score) sections in prompts.
    #[arg(long, conflicts_with = "ep")]
    pub no_ep: bool,
    /// Force encouragement sections on.
    #[arg(long)]
    pub ep: bool,
    /// Disable the static-analyzer cross-check stage.
    #[arg(long, conflicts_with = "crosscheck")]
    pub no_crosscheck: bool,
    /// Force the cross-check stage on.
    #[arg(long)]
    pub crosscheck: bool,
    /// Disable the escalation ladder.
    #[arg(long, conflicts_with = "escalate")]
    pub no_escalate: bool,
    /// Enable the escalation ladder (temperature bumps, then adaptive
    /// prompting) after budget exhaustion.
    #[arg(long)]
    pub escalate: bool,
    /// Arm adaptive example injection from the first fix round.
    #[arg(long)]
    pub adaptive: bool,
    /// Analyzer profile name (config file key; `offline` is built in).
    #[arg(long)]
    pub analyzer: Option<String>,
    /// Fix-prompt family: ep, cot, coc, or plain.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Directory of prompt template overrides.
    #[arg(long)]
    pub templates_dir: Option<std::path::PathBuf>,
    /// Directory of adaptive example pairs.
    #[arg(long)]
    pub adaptive_dir: Option<std::path::PathBuf>,
    /// CWE catalog text file interpolated into identification prompts.
    #[arg(long)]
    pub catalog: Option<std::path::PathBuf>,
}

/// Merge defaults <- config file <- CLI flags into the effective RunConfig.
pub fn effective_run_config(
    language: Language,
    file: &FileConfig,
    overrides: &Overrides,
    escalation_default: bool,
) -> Result<RunConfig> {
    let section = &file.run;
    let mut config = RunConfig::new(language);
    config.escalation_enabled = escalation_default;

    if let Some(v) = &section.provider_profile {
        config.provider_profile = v.clone();
    }
    if let Some(v) = section.max_iterations {
        config.max_iterations = v;
    }
    if let Some(v) = section.temperature_initial {
        config.temperature_initial = v;
    }
    if let Some(v) = section.temperature_step {
        config.temperature_step = v;
    }
    if let Some(v) = section.temperature_cap {
        config.temperature_cap = v;
    }
    if let Some(v) = section.ep_enabled {
        config.ep_enabled = v;
    }
    if let Some(v) = section.crosscheck_enabled {
        config.crosscheck_enabled = v;
    }
    if let Some(v) = section.adaptive_enabled {
        config.adaptive_enabled = v;
    }
    if let Some(v) = section.escalation_enabled {
        config.escalation_enabled = v;
    }
    if let Some(v) = &section.analyzer_profile {
        config.analyzer_profile = v.clone();
    }
    if let Some(v) = &section.strategy {
        config.strategy = FixStrategy::parse(v)
            .ok_or_else(|| anyhow!("unknown strategy {v:?} in config file"))?;
    }
    if let Some(v) = section.findings_cap {
        config.findings_cap = v;
    }

    if let Some(v) = &overrides.provider {
        config.provider_profile = v.clone();
    }
    if let Some(v) = overrides.temperature {
        config.temperature_initial = v;
    }
    if let Some(v) = overrides.max_iterations {
        config.max_iterations = v;
    }
    if overrides.no_ep {
        config.ep_enabled = false;
    }
    if overrides.ep {
        config.ep_enabled = true;
    }
    if overrides.no_crosscheck {
        config.crosscheck_enabled = false;
    }
    if overrides.crosscheck {
        config.crosscheck_enabled = true;
    }
    if overrides.no_escalate {
        config.escalation_enabled = false;
    }
    if overrides.escalate {
        config.escalation_enabled = true;
    }
    if overrides.adaptive {
        config.adaptive_enabled = true;
    }
    if let Some(v) = &overrides.analyzer {
        config.analyzer_profile = v.clone();
    }
    if let Some(v) = &overrides.strategy {
        config.strategy = FixStrategy::parse(v).ok_or_else(|| anyhow!("unknown strategy {v:?}"))?;
    }
    config
        .validate()
        .map_err(|e| anyhow!("invalid configuration: {e}"))?;
    Ok(config)
}

/// Resolve the provider profile with CLI model/name overrides applied.
pub fn effective_provider(
    file: &FileConfig,
    config: &RunConfig,
    overrides: &Overrides,
) -> Result<ProviderProfile> {
    let mut profile = file.provider(&config.provider_profile)?;
    if let Some(model) = &overrides.model {
        profile.model_id = model.clone();
    }
    for warning in profile.validate() {
        eprintln!("secgen: warning: {warning}");
    }
    if profile.kind == ProviderKind::Http && profile.endpoint.is_empty() {
        bail!("provider {} has no endpoint configured", profile.name);
    }
    Ok(profile)
}

pub fn parse_language(text: &str) -> Result<Language> {
    Language::parse(text).ok_or_else(|| anyhow!("unknown language {text:?} (use c, cpp, python)"))
}
