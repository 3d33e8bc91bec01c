//! Ensemble construction under the LOCAL / REMOTE / RANDOM / CHEMISTRY
//! strategies.
//!
//! All randomness is a pure function of an explicit seed. Candidates are
//! sorted by name before shuffling so registry-file order never matters.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chemistry::ChemistryScore;
use crate::domain::{DomainError, EnsembleConfig, Locality, ModelId, Provider, Strategy};

const DEFAULT_REGISTRY: &str = include_str!("../data/models.json");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplingError {
    #[error("strategy {strategy} needs {needed} models but only {available} qualify")]
    InsufficientModels {
        strategy: Strategy,
        needed: usize,
        available: usize,
    },
    #[error("CHEMISTRY sampling requires a chemistry recommendation")]
    MissingChemistryHint,
    #[error("chemistry recommendation has {got} members, expected {n}")]
    HintSizeMismatch { got: usize, n: usize },
    #[error("ensemble size must be positive")]
    ZeroSize,
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RawEntry {
    name: String,
    provider: Provider,
    locality: Locality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    api_key_env: Option<String>,
}

/// One registry line: the model identity plus how to reach it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawEntry", into = "RawEntry")]
pub struct RegistryEntry {
    pub model: ModelId,
    pub base_url: Option<String>,
    pub api_key_env: Option<String>,
}

impl TryFrom<RawEntry> for RegistryEntry {
    type Error = DomainError;

    fn try_from(raw: RawEntry) -> Result<Self, Self::Error> {
        Ok(RegistryEntry {
            model: ModelId::with_locality(raw.provider, raw.name, raw.locality)?,
            base_url: raw.base_url,
            api_key_env: raw.api_key_env,
        })
    }
}

impl From<RegistryEntry> for RawEntry {
    fn from(e: RegistryEntry) -> Self {
        RawEntry {
            name: e.model.name().to_string(),
            provider: e.model.provider(),
            locality: e.model.locality(),
            base_url: e.base_url,
            api_key_env: e.api_key_env,
        }
    }
}

impl RegistryEntry {
    pub fn bare(model: ModelId) -> Self {
        RegistryEntry {
            model,
            base_url: None,
            api_key_env: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("registry lists model {0:?} twice")]
pub struct DuplicateModel(pub String);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registry {
    entries: Vec<RegistryEntry>,
}

impl Registry {
    pub fn new(entries: Vec<RegistryEntry>) -> Result<Self, DuplicateModel> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.model.name().to_string()) {
                return Err(DuplicateModel(e.model.name().to_string()));
            }
        }
        Ok(Registry { entries })
    }

    /// The fourteen models of the reference study: ten hosted, four local.
    pub fn reference() -> Self {
        let entries: Vec<RegistryEntry> =
            serde_json::from_str(DEFAULT_REGISTRY).expect("bundled registry is valid");
        Registry::new(entries).expect("bundled registry has unique names")
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn models(&self) -> impl Iterator<Item = &ModelId> {
        self.entries.iter().map(|e| &e.model)
    }

    pub fn get(&self, name: &str) -> Option<&ModelId> {
        self.models().find(|m| m.name() == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Derives an independent child seed from a parent seed and a label.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Deterministic permutation of `items` driven by `seed` (Fisher-Yates).
pub fn seeded_shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// First `n` models of a seeded shuffle over the name-sorted candidates.
pub fn seeded_subset(items: &[ModelId], n: usize, seed: u64) -> Option<Vec<ModelId>> {
    if n > items.len() {
        return None;
    }
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| a.name().cmp(b.name()));
    seeded_shuffle(&mut sorted, seed);
    sorted.truncate(n);
    Some(sorted)
}

pub fn sample(
    strategy: Strategy,
    registry: &Registry,
    n: usize,
    seed: u64,
    chemistry_hint: Option<&ChemistryScore>,
) -> Result<EnsembleConfig, SamplingError> {
    if n == 0 {
        return Err(SamplingError::ZeroSize);
    }
    let filter: fn(&ModelId) -> bool = match strategy {
        Strategy::Local => |m| m.locality() == Locality::Local,
        Strategy::Remote => |m| m.locality() == Locality::Remote,
        Strategy::Random => |_| true,
        Strategy::Chemistry => {
            let hint = chemistry_hint.ok_or(SamplingError::MissingChemistryHint)?;
            if hint.members.len() != n {
                return Err(SamplingError::HintSizeMismatch {
                    got: hint.members.len(),
                    n,
                });
            }
            return Ok(EnsembleConfig::new(strategy, hint.members.clone(), seed)?);
        }
    };
    let candidates: Vec<ModelId> = registry.models().filter(|m| filter(m)).cloned().collect();
    let members =
        seeded_subset(&candidates, n, seed).ok_or(SamplingError::InsufficientModels {
            strategy,
            needed: n,
            available: candidates.len(),
        })?;
    Ok(EnsembleConfig::new(strategy, members, seed)?)
}
