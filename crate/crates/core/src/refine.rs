//! Stage 2: analysis-driven fusion of the stage 1 candidates.
//!
//! The refiner sees the whole dialogue at once as a list of
//! `{role, source, hypothesis1..N}` records and answers with one
//! `{analysis, final}` object per record.

use std::sync::Arc;
use std::time::Instant;

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::backends::{ChatBackend, ChatOutcome, ChatRequest};
use crate::corpus::{Dialogue, Role, Utterance};
use crate::hypothesis::AlignedTranslation;
use crate::outcome::{CallTally, DialogueFailure, ExclusionCause};
use crate::prompts::{
    refine_correction, refine_system_prompt, with_correction, PromptVersion, RefinePromptOptions,
};
use crate::text::{estimate_tokens, flatten_line_breaks, strip_code_fence};

/// Number of candidates in the standard record schema.
pub const HYPOTHESIS_COUNT: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RefineError {
    #[error("expected {expected} hypotheses, got {got}")]
    HypothesisCountMismatch { expected: usize, got: usize },
    #[error("hypothesis from {backend_id:?} has {got} utterances, source has {expected}")]
    AlignmentViolation {
        backend_id: String,
        expected: usize,
        got: usize,
    },
    #[error("target language is empty")]
    EmptyTargetLanguage,
    #[error("selection index {index} out of range for {count} hypotheses")]
    SelectionOutOfRange { index: usize, count: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RefinerOutputError {
    #[error("expected {expected} records, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("record {0} has no usable 'final' value")]
    MissingFinal(usize),
    #[error("record {0} has an empty 'analysis'")]
    MissingAnalysis(usize),
    #[error("output is not a JSON array of records: {0}")]
    UnparseableOutput(String),
}

/// One input record for the refiner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefineRecord {
    pub role: String,
    pub source: String,
    pub hypotheses: Vec<String>,
}

impl Serialize for RefineRecord {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(2 + self.hypotheses.len()))?;
        map.serialize_entry("role", &self.role)?;
        map.serialize_entry("source", &self.source)?;
        for (i, h) in self.hypotheses.iter().enumerate() {
            map.serialize_entry(&format!("hypothesis{}", i + 1), h)?;
        }
        map.end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinedUtterance {
    pub analysis: String,
    #[serde(rename = "final")]
    pub final_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FusionMode {
    /// Run the refiner over all candidates.
    #[default]
    Refine,
    /// Take candidate `hypothesis` (1-based) verbatim; no refiner call.
    Select { hypothesis: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub hypothesis_backends: Vec<String>,
    pub refiner_backend: Option<String>,
    pub prompt_version: PromptVersion,
    pub fusion: FusionMode,
}

/// Final per-utterance translations of one dialogue, with the refiner's analyses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinedDialogue {
    dialogue_id: String,
    target_language: String,
    utterances: Vec<RefinedUtterance>,
    provenance: Provenance,
}

impl RefinedDialogue {
    pub fn new(
        source: &Dialogue,
        target_language: impl Into<String>,
        utterances: Vec<RefinedUtterance>,
        provenance: Provenance,
    ) -> Result<Self, RefinerOutputError> {
        if utterances.len() != source.len() {
            return Err(RefinerOutputError::CountMismatch {
                expected: source.len(),
                got: utterances.len(),
            });
        }
        let finals: Vec<&str> = utterances.iter().map(|u| u.final_text.as_str()).collect();
        if source.with_texts("und", &finals).is_err() {
            let bad = finals
                .iter()
                .position(|f| Utterance::new(Role::Client, *f).is_err())
                .unwrap_or(0);
            return Err(RefinerOutputError::MissingFinal(bad));
        }
        Ok(RefinedDialogue {
            dialogue_id: source.id().to_string(),
            target_language: target_language.into(),
            utterances,
            provenance,
        })
    }

    pub fn dialogue_id(&self) -> &str {
        &self.dialogue_id
    }

    pub fn target_language(&self) -> &str {
        &self.target_language
    }

    pub fn utterances(&self) -> &[RefinedUtterance] {
        &self.utterances
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// The final translation as a dialogue with the source's id, roles and metadata.
    pub fn to_dialogue(&self, source: &Dialogue) -> Dialogue {
        let finals: Vec<&str> = self
            .utterances
            .iter()
            .map(|u| u.final_text.as_str())
            .collect();
        source
            .with_texts(self.target_language.clone(), &finals)
            .expect("refined dialogue was validated against its source")
    }
}

/// Records for the standard three-candidate schema.
pub fn build_refine_input(
    d: &Dialogue,
    hyps: &[AlignedTranslation],
) -> Result<Vec<RefineRecord>, RefineError> {
    build_refine_input_n(d, hyps, HYPOTHESIS_COUNT)
}

/// Records for an `expected`-candidate schema; candidate order is `hyps` order.
pub fn build_refine_input_n(
    d: &Dialogue,
    hyps: &[AlignedTranslation],
    expected: usize,
) -> Result<Vec<RefineRecord>, RefineError> {
    if hyps.len() != expected {
        return Err(RefineError::HypothesisCountMismatch {
            expected,
            got: hyps.len(),
        });
    }
    if let Some(bad) = hyps.iter().find(|h| h.len() != d.len()) {
        return Err(RefineError::AlignmentViolation {
            backend_id: bad.backend_id().to_string(),
            expected: d.len(),
            got: bad.len(),
        });
    }
    Ok(d.utterances()
        .iter()
        .enumerate()
        .map(|(i, u)| RefineRecord {
            role: u.role().as_str().to_string(),
            source: u.text().to_string(),
            hypotheses: hyps.iter().map(|h| h.texts()[i].clone()).collect(),
        })
        .collect())
}

/// Refiner user message: the records as a JSON array.
pub fn render_refine_input(records: &[RefineRecord]) -> String {
    serde_json::to_string_pretty(records).expect("records serialize")
}

/// Stage 2 system prompt for the standard schema.
pub fn build_refine_prompt(target_language: &str) -> String {
    refine_system_prompt(target_language, RefinePromptOptions::default())
}

fn extract_array(raw: &str) -> &str {
    let body = strip_code_fence(raw);
    if body.starts_with('[') {
        return body;
    }
    match (body.find('['), body.rfind(']')) {
        (Some(start), Some(end)) if start < end => &body[start..=end],
        _ => body,
    }
}

/// Parses the refiner's reply; analyses are required.
pub fn parse_refiner_output(
    raw: &str,
    expected_len: usize,
) -> Result<Vec<RefinedUtterance>, RefinerOutputError> {
    parse_refiner_output_with(raw, expected_len, true)
}

pub fn parse_refiner_output_with(
    raw: &str,
    expected_len: usize,
    require_analysis: bool,
) -> Result<Vec<RefinedUtterance>, RefinerOutputError> {
    let items: Vec<Value> = serde_json::from_str(extract_array(raw))
        .map_err(|e| RefinerOutputError::UnparseableOutput(e.to_string()))?;
    if items.len() != expected_len {
        return Err(RefinerOutputError::CountMismatch {
            expected: expected_len,
            got: items.len(),
        });
    }
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let obj = item.as_object().ok_or_else(|| {
                RefinerOutputError::UnparseableOutput(format!("record {i} is not an object"))
            })?;
            let final_text = obj
                .get("final")
                .and_then(Value::as_str)
                .map(flatten_line_breaks)
                .filter(|f| !f.is_empty())
                .ok_or(RefinerOutputError::MissingFinal(i))?;
            let analysis = obj
                .get("analysis")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .trim()
                .to_string();
            if require_analysis && analysis.is_empty() {
                return Err(RefinerOutputError::MissingAnalysis(i));
            }
            Ok(RefinedUtterance {
                analysis,
                final_text,
            })
        })
        .collect()
}

/// Result of stage 2 for one dialogue.
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub result: Result<RefinedDialogue, DialogueFailure>,
    pub tally: CallTally,
}

/// Builds a refined dialogue that takes candidate `hypothesis` (1-based) verbatim.
pub fn select_hypothesis(
    d: &Dialogue,
    hyps: &[AlignedTranslation],
    hypothesis: usize,
    target_language: &str,
    prompt_version: PromptVersion,
) -> Result<RefinedDialogue, RefineError> {
    let chosen = hypothesis.checked_sub(1).and_then(|i| hyps.get(i)).ok_or(
        RefineError::SelectionOutOfRange {
            index: hypothesis,
            count: hyps.len(),
        },
    )?;
    if chosen.len() != d.len() {
        return Err(RefineError::AlignmentViolation {
            backend_id: chosen.backend_id().to_string(),
            expected: d.len(),
            got: chosen.len(),
        });
    }
    let utterances = chosen
        .texts()
        .iter()
        .map(|t| RefinedUtterance {
            analysis: String::new(),
            final_text: t.clone(),
        })
        .collect();
    let provenance = Provenance {
        hypothesis_backends: hyps.iter().map(|h| h.backend_id().to_string()).collect(),
        refiner_backend: None,
        prompt_version,
        fusion: FusionMode::Select { hypothesis },
    };
    Ok(
        RefinedDialogue::new(d, target_language, utterances, provenance)
            .expect("aligned hypothesis has valid texts"),
    )
}

/// The refiner call for one dialogue.
pub struct RefineStage {
    refiner: Arc<dyn ChatBackend>,
    target_language: String,
    retry_budget: u32,
    options: RefinePromptOptions,
    system_prompt: String,
}

impl RefineStage {
    pub fn new(
        refiner: Arc<dyn ChatBackend>,
        target_language: &str,
        retry_budget: u32,
        options: RefinePromptOptions,
    ) -> Result<Self, RefineError> {
        if target_language.trim().is_empty() {
            return Err(RefineError::EmptyTargetLanguage);
        }
        Ok(RefineStage {
            system_prompt: refine_system_prompt(target_language, options),
            refiner,
            target_language: target_language.to_string(),
            retry_budget,
            options,
        })
    }

    pub fn system_prompt(&self) -> &str {
        &self.system_prompt
    }

    pub fn refiner_id(&self) -> &str {
        self.refiner.backend_id()
    }

    /// One refiner call over the whole dialogue, re-prompting on unusable output.
    pub fn refine(
        &self,
        d: &Dialogue,
        hyps: &[AlignedTranslation],
    ) -> Result<RefineOutcome, RefineError> {
        let records = build_refine_input_n(d, hyps, self.options.hypothesis_count)?;
        let user = render_refine_input(&records);
        let started = Instant::now();
        let mut tally = CallTally::new(self.refiner.backend_id());
        let result = self.run(d, hyps, &user, &mut tally);
        tally.elapsed = started.elapsed();
        Ok(RefineOutcome { result, tally })
    }

    fn run(
        &self,
        d: &Dialogue,
        hyps: &[AlignedTranslation],
        user: &str,
        tally: &mut CallTally,
    ) -> Result<RefinedDialogue, DialogueFailure> {
        let refiner_id = self.refiner.backend_id();
        let fail = |cause| DialogueFailure::single(refiner_id, cause);
        if let Some(budget) = self.refiner.max_input_tokens() {
            if estimate_tokens(&self.system_prompt) + estimate_tokens(user) > budget {
                return Err(fail(ExclusionCause::Oversize));
            }
        }
        let provenance = Provenance {
            hypothesis_backends: hyps.iter().map(|h| h.backend_id().to_string()).collect(),
            refiner_backend: Some(refiner_id.to_string()),
            prompt_version: self.options.version,
            fusion: FusionMode::Refine,
        };
        let mut last_error: Option<RefinerOutputError> = None;
        for attempt in 0..=self.retry_budget {
            let content = match &last_error {
                None => user.to_string(),
                Some(e) => with_correction(user, &refine_correction(&e.to_string(), d.len())),
            };
            if attempt > 0 {
                tally.corrective_retries += 1;
            }
            let request = ChatRequest::new(self.system_prompt.clone(), content)
                .expect("prompt and records are non-empty");
            let completion = self.refiner.call(&request);
            tally.requests += 1;
            tally.attempts += completion.attempts;
            let text = match completion.outcome {
                ChatOutcome::Failure { kind, .. } => return Err(fail(kind.into())),
                ChatOutcome::Success { text, .. } => text,
            };
            let parsed = parse_refiner_output_with(&text, d.len(), self.options.with_analysis)
                .and_then(|utterances| {
                    RefinedDialogue::new(d, &self.target_language, utterances, provenance.clone())
                });
            match parsed {
                Ok(refined) => return Ok(refined),
                Err(e) => {
                    tracing::debug!(dialogue = d.id(), error = %e, "unusable refiner output");
                    last_error = Some(e);
                }
            }
        }
        Err(fail(ExclusionCause::Misalignment))
    }
}
