//! Per-dialogue failure causes and call tallies shared by both stages.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backends::FailureKind;

/// Why a dialogue was excluded from the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExclusionCause {
    SafetyRefusal,
    Oversize,
    /// Output could not be aligned to the source within the retry budget.
    Misalignment,
    Malformed,
    Transient,
}

impl ExclusionCause {
    fn severity(self) -> u8 {
        match self {
            ExclusionCause::SafetyRefusal => 0,
            ExclusionCause::Oversize => 1,
            ExclusionCause::Misalignment => 2,
            ExclusionCause::Malformed => 3,
            ExclusionCause::Transient => 4,
        }
    }
}

impl From<FailureKind> for ExclusionCause {
    fn from(kind: FailureKind) -> Self {
        match kind {
            FailureKind::Transient => ExclusionCause::Transient,
            FailureKind::SafetyRefusal => ExclusionCause::SafetyRefusal,
            FailureKind::Oversize => ExclusionCause::Oversize,
            FailureKind::Malformed => ExclusionCause::Malformed,
        }
    }
}

impl fmt::Display for ExclusionCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A whole-dialogue failure with the cause reported by each failing backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueFailure {
    pub causes: BTreeMap<String, ExclusionCause>,
}

impl DialogueFailure {
    pub fn single(backend_id: &str, cause: ExclusionCause) -> Self {
        let mut causes = BTreeMap::new();
        causes.insert(backend_id.to_string(), cause);
        DialogueFailure { causes }
    }

    /// The most significant cause: refusals first, transient errors last.
    pub fn primary_cause(&self) -> ExclusionCause {
        self.causes
            .values()
            .copied()
            .min_by_key(|c| c.severity())
            .unwrap_or(ExclusionCause::Malformed)
    }
}

/// Work done against one backend for one dialogue.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallTally {
    pub backend_id: String,
    /// Requests issued (initial + corrective re-prompts).
    pub requests: u32,
    /// Network attempts including transport-level retries.
    pub attempts: u32,
    /// Corrective re-prompts after unusable output.
    pub corrective_retries: u32,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl CallTally {
    pub fn new(backend_id: &str) -> Self {
        CallTally {
            backend_id: backend_id.to_string(),
            ..Default::default()
        }
    }
}
