//! Shared domain types: CWE identifiers, target languages, code artifacts.

use std::fmt;

use serde::{Deserialize, Serialize};

/// A normalized CWE identifier (`CWE-` followed by 1..4 digits).
///
/// Accepts the spelling variants that show up in model output ("CWE 120",
/// "cwe-120", "CWE-120:") and normalizes them all to the canonical form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cwe(pub u16);

impl Cwe {
    /// Parse a CWE mention, tolerating case, separator, and trailing
    /// punctuation variance. Returns `None` when the text is not a CWE id.
    pub fn parse(text: &str) -> Option<Cwe> {
        let trimmed = text.trim().trim_end_matches([':', '.', ',', ';', ')']);
        let rest = trimmed
            .strip_prefix("CWE")
            .or_else(|| trimmed.strip_prefix("cwe"))
            .or_else(|| trimmed.strip_prefix("Cwe"))?;
        let digits = rest.trim_start_matches(['-', ' ', '_']);
        if digits.is_empty() || digits.len() > 4 || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        digits.parse().ok().map(Cwe)
    }
}

impl fmt::Display for Cwe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CWE-{}", self.0)
    }
}

impl Serialize for Cwe {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Cwe {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Cwe::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("invalid CWE id: {s}")))
    }
}

/// Target programming language of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    C,
    Cpp,
    Python,
}

impl Language {
    /// Human-readable name used inside prompts.
    pub fn display_name(self) -> &'static str {
        match self {
            Language::C => "C",
            Language::Cpp => "C++",
            Language::Python => "Python",
        }
    }

    /// Canonical fenced-code-block tag.
    pub fn fence_tag(self) -> &'static str {
        match self {
            Language::C => "c",
            Language::Cpp => "cpp",
            Language::Python => "python",
        }
    }

    /// All tags accepted when looking for a fenced block of this language.
    pub fn accepted_tags(self) -> &'static [&'static str] {
        match self {
            Language::C => &["c"],
            Language::Cpp => &["cpp", "c++", "cxx", "cc"],
            Language::Python => &["python", "py", "python3"],
        }
    }

    /// Source file extension.
    pub fn extension(self) -> &'static str {
        match self {
            Language::C => "c",
            Language::Cpp => "cpp",
            Language::Python => "py",
        }
    }

    /// Whether the language needs a compile step before analysis.
    pub fn requires_build(self) -> bool {
        matches!(self, Language::C | Language::Cpp)
    }

    pub fn parse(text: &str) -> Option<Language> {
        match text.trim().to_ascii_lowercase().as_str() {
            "c" => Some(Language::C),
            "cpp" | "c++" | "cxx" => Some(Language::Cpp),
            "python" | "py" => Some(Language::Python),
            _ => None,
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

/// A versioned snapshot of generated or fixed source code.
///
/// Version 0 is the initially generated program; every fix round bumps the
/// version. `lineage` records how the snapshot came to be (which stage
/// produced it and how the code was extracted from the reply).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeArtifact {
    pub language: Language,
    pub source: String,
    pub version: u32,
    pub lineage: String,
}

impl CodeArtifact {
    pub fn new(language: Language, source: impl Into<String>, lineage: impl Into<String>) -> Self {
        CodeArtifact {
            language,
            source: source.into(),
            version: 0,
            lineage: lineage.into(),
        }
    }

    /// Next version of this artifact with new source.
    pub fn evolve(&self, source: impl Into<String>, lineage: impl Into<String>) -> Self {
        CodeArtifact {
            language: self.language,
            source: source.into(),
            version: self.version + 1,
            lineage: lineage.into(),
        }
    }

    /// Hex SHA-256 of the source bytes.
    pub fn digest(&self) -> String {
        crate::digest_hex(self.source.as_bytes())
    }
}
