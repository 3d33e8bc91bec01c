//! Core vocabulary shared by every other module.
//!
//! Everything here is an immutable value type. Validation of grades and
//! medication entries lives next to the types it protects.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("grade is not a finite number: {0}")]
    InvalidGrade(f64),
    #[error("model name must not be empty")]
    EmptyModelName,
    #[error("model {name}: locality {locality} does not match provider {provider}")]
    LocalityMismatch {
        name: String,
        provider: Provider,
        locality: Locality,
    },
    #[error("ensemble size must be positive")]
    ZeroEnsemble,
    #[error("ensemble lists {members} members but n = {n}")]
    SizeMismatch { members: usize, n: usize },
    #[error("ensemble member {0} appears more than once")]
    DuplicateMember(String),
    #[error("majority agreement needs at least 3 members, got {0}")]
    NoMajority(usize),
    #[error("recommendation lists medication {0} more than once")]
    DuplicateMedication(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provider {
    OpenaiCompatible,
    AnthropicCompatible,
    OllamaCompatible,
    Scripted,
}

impl Provider {
    /// Locality implied by the wire protocol.
    pub fn locality(self) -> Locality {
        match self {
            Provider::OpenaiCompatible | Provider::AnthropicCompatible => Locality::Remote,
            Provider::OllamaCompatible | Provider::Scripted => Locality::Local,
        }
    }
}

impl fmt::Display for Provider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provider::OpenaiCompatible => "openai-compatible",
            Provider::AnthropicCompatible => "anthropic-compatible",
            Provider::OllamaCompatible => "ollama-compatible",
            Provider::Scripted => "scripted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Locality {
    Remote,
    Local,
}

impl fmt::Display for Locality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Locality::Remote => "remote",
            Locality::Local => "local",
        })
    }
}

#[derive(Deserialize)]
struct RawModelId {
    provider: Provider,
    name: String,
    locality: Locality,
}

/// Identity of one ensemble member. Locality is carried explicitly so that
/// strategy filters never have to guess from provider strings.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawModelId")]
pub struct ModelId {
    provider: Provider,
    name: String,
    locality: Locality,
}

impl TryFrom<RawModelId> for ModelId {
    type Error = DomainError;

    fn try_from(raw: RawModelId) -> Result<Self, Self::Error> {
        ModelId::with_locality(raw.provider, raw.name, raw.locality)
    }
}

impl ModelId {
    pub fn new(provider: Provider, name: impl Into<String>) -> Result<Self, DomainError> {
        ModelId::with_locality(provider, name, provider.locality())
    }

    pub fn with_locality(
        provider: Provider,
        name: impl Into<String>,
        locality: Locality,
    ) -> Result<Self, DomainError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(DomainError::EmptyModelName);
        }
        if provider.locality() != locality {
            return Err(DomainError::LocalityMismatch {
                name,
                provider,
                locality,
            });
        }
        Ok(ModelId {
            provider,
            name,
            locality,
        })
    }

    pub fn provider(&self) -> Provider {
        self.provider
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn locality(&self) -> Locality {
        self.locality
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalNote {
    pub id: String,
    pub vignette: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MedicationEntry {
    pub name: String,
    pub dosage: String,
    pub route: String,
    pub frequency: String,
    #[serde(default)]
    pub timing: String,
    pub indication: String,
}

/// Ground-truth medication lists keyed by note id.
pub type GroundTruth = std::collections::BTreeMap<String, Vec<MedicationEntry>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryViolation {
    EmptyName,
    EmptyDosage,
    EmptyRoute,
    EmptyFrequency,
    EmptyIndication,
}

impl fmt::Display for EntryViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntryViolation::EmptyName => "empty name",
            EntryViolation::EmptyDosage => "empty dosage",
            EntryViolation::EmptyRoute => "empty route",
            EntryViolation::EmptyFrequency => "empty frequency",
            EntryViolation::EmptyIndication => "empty indication",
        })
    }
}

/// Lowercase, trim and collapse internal whitespace. This is the only text
/// canonicalization the domain layer applies; field-specific rules live in
/// `scoring`.
pub fn canonical_text(raw: &str) -> String {
    raw.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Returns every violated invariant; an empty list means the entry is valid.
/// Timing is optional and never reported.
pub fn validate_entry(entry: &MedicationEntry) -> Vec<EntryViolation> {
    let checks = [
        (&entry.name, EntryViolation::EmptyName),
        (&entry.dosage, EntryViolation::EmptyDosage),
        (&entry.route, EntryViolation::EmptyRoute),
        (&entry.frequency, EntryViolation::EmptyFrequency),
        (&entry.indication, EntryViolation::EmptyIndication),
    ];
    checks
        .into_iter()
        .filter(|(field, _)| canonical_text(field).is_empty())
        .map(|(_, v)| v)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Recommendation {
    pub entries: Vec<MedicationEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

impl Recommendation {
    /// Builds a recommendation, rejecting duplicate medication names.
    pub fn new(
        entries: Vec<MedicationEntry>,
        rationale: Option<String>,
    ) -> Result<Self, DomainError> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            let key = canonical_text(&e.name);
            if !seen.insert(key.clone()) {
                return Err(DomainError::DuplicateMedication(key));
            }
        }
        Ok(Recommendation { entries, rationale })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradeKind {
    ExplicitReview,
    ImplicitSelf,
}

/// Resolution grades are quantized to before storage. Nine fractional
/// digits survive a decimal round-trip exactly.
const GRADE_QUANTUM: f64 = 1e9;

/// Clamps a raw grade into `[0, 1]` and quantizes it to nine decimals.
pub fn clamp_grade(raw: f64) -> Result<f64, DomainError> {
    if !raw.is_finite() {
        return Err(DomainError::InvalidGrade(raw));
    }
    let clamped = raw.clamp(0.0, 1.0);
    Ok((clamped * GRADE_QUANTUM).round() / GRADE_QUANTUM)
}

#[derive(Deserialize)]
struct RawGrade {
    value: f64,
    kind: GradeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrade")]
pub struct Grade {
    value: f64,
    kind: GradeKind,
}

impl TryFrom<RawGrade> for Grade {
    type Error = DomainError;

    fn try_from(raw: RawGrade) -> Result<Self, Self::Error> {
        match raw.kind {
            GradeKind::ExplicitReview => Grade::review(raw.value),
            GradeKind::ImplicitSelf => Ok(Grade::implicit_self()),
        }
    }
}

impl Grade {
    pub fn review(raw: f64) -> Result<Self, DomainError> {
        Ok(Grade {
            value: clamp_grade(raw)?,
            kind: GradeKind::ExplicitReview,
        })
    }

    pub fn implicit_self() -> Self {
        Grade {
            value: 1.0,
            kind: GradeKind::ImplicitSelf,
        }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn kind(&self) -> GradeKind {
        self.kind
    }

    pub fn is_explicit(&self) -> bool {
        self.kind == GradeKind::ExplicitReview
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Strategy {
    Local,
    Remote,
    Random,
    Chemistry,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Local,
        Strategy::Remote,
        Strategy::Random,
        Strategy::Chemistry,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Local => "LOCAL",
            Strategy::Remote => "REMOTE",
            Strategy::Random => "RANDOM",
            Strategy::Chemistry => "CHEMISTRY",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

#[derive(Deserialize)]
struct RawEnsemble {
    strategy: Strategy,
    members: Vec<ModelId>,
    n: usize,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawEnsemble")]
pub struct EnsembleConfig {
    strategy: Strategy,
    members: Vec<ModelId>,
    n: usize,
    seed: u64,
}

impl TryFrom<RawEnsemble> for EnsembleConfig {
    type Error = DomainError;

    fn try_from(raw: RawEnsemble) -> Result<Self, Self::Error> {
        if raw.members.len() != raw.n {
            return Err(DomainError::SizeMismatch {
                members: raw.members.len(),
                n: raw.n,
            });
        }
        EnsembleConfig::new(raw.strategy, raw.members, raw.seed)
    }
}

impl EnsembleConfig {
    pub fn new(strategy: Strategy, members: Vec<ModelId>, seed: u64) -> Result<Self, DomainError> {
        if members.is_empty() {
            return Err(DomainError::ZeroEnsemble);
        }
        let mut names = BTreeSet::new();
        for m in &members {
            if !names.insert(m.name()) {
                return Err(DomainError::DuplicateMember(m.name().to_string()));
            }
        }
        Ok(EnsembleConfig {
            strategy,
            n: members.len(),
            members,
            seed,
        })
    }

    /// Like [`EnsembleConfig::new`] but also insists on a majority-capable size.
    pub fn with_majority(
        strategy: Strategy,
        members: Vec<ModelId>,
        seed: u64,
    ) -> Result<Self, DomainError> {
        if members.len() < 3 {
            return Err(DomainError::NoMajority(members.len()));
        }
        EnsembleConfig::new(strategy, members, seed)
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn members(&self) -> &[ModelId] {
        &self.members
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Serializes a `Duration` as integer milliseconds.
pub mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}
