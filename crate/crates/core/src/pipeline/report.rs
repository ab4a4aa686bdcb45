use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::outcome::{CallTally, ExclusionCause};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Hypothesis,
    Refine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionEntry {
    pub dialogue_id: String,
    pub stage: Stage,
    pub cause: ExclusionCause,
    /// Cause reported by each failing backend.
    pub causes: BTreeMap<String, ExclusionCause>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendTotals {
    pub dialogues: u64,
    pub requests: u64,
    pub attempts: u64,
    pub transport_retries: u64,
    pub corrective_retries: u64,
}

impl BackendTotals {
    pub fn add(&mut self, tally: &CallTally) {
        self.dialogues += 1;
        self.requests += u64::from(tally.requests);
        self.attempts += u64::from(tally.attempts);
        self.transport_retries += u64::from(tally.attempts.saturating_sub(tally.requests));
        self.corrective_retries += u64::from(tally.corrective_retries);
    }
}

#[derive(Debug, Error)]
#[error("conservation violated: {emitted} emitted + {excluded} excluded != {input} input")]
pub struct ConservationError {
    pub input: usize,
    pub emitted: usize,
    pub excluded: usize,
}

/// Accounting for one run: every input dialogue is either emitted or excluded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BuildReport {
    input_count: usize,
    emitted_count: usize,
    excluded: Vec<ExclusionEntry>,
    excluded_by_cause: BTreeMap<ExclusionCause, usize>,
    backends: BTreeMap<String, BackendTotals>,
    fingerprint: String,
}

impl BuildReport {
    pub fn new(
        input_count: usize,
        emitted_count: usize,
        excluded: Vec<ExclusionEntry>,
        backends: BTreeMap<String, BackendTotals>,
        fingerprint: String,
    ) -> Result<Self, ConservationError> {
        if emitted_count + excluded.len() != input_count {
            return Err(ConservationError {
                input: input_count,
                emitted: emitted_count,
                excluded: excluded.len(),
            });
        }
        let mut excluded_by_cause = BTreeMap::new();
        for entry in &excluded {
            *excluded_by_cause.entry(entry.cause).or_insert(0) += 1;
        }
        Ok(BuildReport {
            input_count,
            emitted_count,
            excluded,
            excluded_by_cause,
            backends,
            fingerprint,
        })
    }

    pub fn input_count(&self) -> usize {
        self.input_count
    }

    pub fn emitted_count(&self) -> usize {
        self.emitted_count
    }

    pub fn excluded(&self) -> &[ExclusionEntry] {
        &self.excluded
    }

    pub fn excluded_by_cause(&self) -> &BTreeMap<ExclusionCause, usize> {
        &self.excluded_by_cause
    }

    pub fn backends(&self) -> &BTreeMap<String, BackendTotals> {
        &self.backends
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "input {}  emitted {}  excluded {}\n",
            self.input_count,
            self.emitted_count,
            self.excluded.len()
        );
        for (cause, n) in &self.excluded_by_cause {
            out.push_str(&format!("  {cause}: {n}\n"));
        }
        for (id, t) in &self.backends {
            out.push_str(&format!(
                "  {id}: {} requests, {} transport retries, {} corrective retries\n",
                t.requests, t.transport_retries, t.corrective_retries
            ));
        }
        out
    }
}

/// Wall-clock spent per backend during this process. Not part of the
/// deterministic report.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timings {
    pub per_backend_ms: BTreeMap<String, u128>,
    pub total_ms: u128,
}

impl Timings {
    pub fn add(&mut self, backend_id: &str, elapsed: Duration) {
        *self
            .per_backend_ms
            .entry(backend_id.to_string())
            .or_insert(0) += elapsed.as_millis();
    }
}
