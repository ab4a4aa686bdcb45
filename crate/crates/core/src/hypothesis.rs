//! Stage 1: whole-dialogue translation by several backends.
//!
//! Each backend receives the entire dialogue as `Role: text` lines and must
//! answer with exactly as many lines, in the same role order. Output that
//! cannot be aligned is re-requested with a corrective instruction; it is never
//! repaired heuristically.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::backends::{ChatBackend, ChatOutcome, ChatRequest};
use crate::corpus::{parse_lines, serialize_dialogue, CorpusError, Dialogue, Role, RoleLexicon};
use crate::outcome::{CallTally, DialogueFailure, ExclusionCause};
use crate::prompts::{hypothesis_correction, hypothesis_system_prompt, with_correction};
use crate::text::{estimate_tokens, strip_code_fence};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AlignmentError {
    #[error("expected {expected} utterances, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("role sequence differs from the source at utterance {first_bad_index}")]
    RoleSequenceMismatch { first_bad_index: usize },
    #[error("output is not in 'Role: text' form: {0}")]
    UnparseableOutput(String),
}

#[derive(Debug, Error)]
pub enum HypothesisError {
    #[error("at least two hypothesis backends are required, got {0}")]
    TooFewBackends(usize),
    #[error("duplicate backend id {0:?}")]
    DuplicateBackend(String),
    #[error("target language is empty")]
    EmptyTargetLanguage,
}

/// One backend's translation of a whole dialogue, aligned 1:1 with the source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AlignedTranslation {
    backend_id: String,
    target_language: String,
    texts: Vec<String>,
}

impl AlignedTranslation {
    /// Checks that `texts` has one valid utterance text per source utterance.
    pub fn new(
        source: &Dialogue,
        backend_id: impl Into<String>,
        target_language: impl Into<String>,
        texts: Vec<String>,
    ) -> Result<Self, AlignmentError> {
        if texts.len() != source.len() {
            return Err(AlignmentError::CountMismatch {
                expected: source.len(),
                got: texts.len(),
            });
        }
        // reuse the utterance invariants (non-empty, single line, trimmed)
        source
            .with_texts("und", &texts)
            .map_err(|e| AlignmentError::UnparseableOutput(e.to_string()))?;
        Ok(AlignedTranslation {
            backend_id: backend_id.into(),
            target_language: target_language.into(),
            texts,
        })
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn target_language(&self) -> &str {
        &self.target_language
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// The translation as a dialogue with the source's id, roles and metadata.
    pub fn to_dialogue(&self, source: &Dialogue) -> Dialogue {
        source
            .with_texts(self.target_language.clone(), &self.texts)
            .expect("aligned translation was validated against this source")
    }
}

/// Stage 1 system prompt for `target_language`.
pub fn build_hypothesis_prompt(target_language: &str) -> String {
    hypothesis_system_prompt(target_language)
}

/// Stage 1 user message: the dialogue as `Role: text` lines.
pub fn render_dialogue_for_prompt(d: &Dialogue) -> String {
    serialize_dialogue(d)
}

/// Aligns a backend's raw output with the source dialogue.
pub fn align_translation(
    source: &Dialogue,
    raw_output: &str,
    backend_id: &str,
    target_language: &str,
    lexicon: &RoleLexicon,
) -> Result<AlignedTranslation, AlignmentError> {
    let body = strip_code_fence(raw_output);
    let utterances = parse_lines(body, lexicon).map_err(|e| match e {
        CorpusError::EmptyInput => AlignmentError::UnparseableOutput("empty output".into()),
        other => AlignmentError::UnparseableOutput(other.to_string()),
    })?;
    if utterances.len() != source.len() {
        return Err(AlignmentError::CountMismatch {
            expected: source.len(),
            got: utterances.len(),
        });
    }
    if let Some(first_bad_index) = source
        .roles()
        .zip(utterances.iter().map(|u| u.role()))
        .position(|(a, b)| a != b)
    {
        return Err(AlignmentError::RoleSequenceMismatch { first_bad_index });
    }
    let texts = utterances.iter().map(|u| u.text().to_string()).collect();
    AlignedTranslation::new(source, backend_id, target_language, texts)
}

/// Result of stage 1 for one dialogue.
#[derive(Debug, Clone)]
pub struct HypothesisOutcome {
    /// Translations in configured backend order, or the failure.
    pub result: Result<Vec<AlignedTranslation>, DialogueFailure>,
    /// One tally per backend, in configured order.
    pub tallies: Vec<CallTally>,
}

/// Fan-out of one dialogue to K backends.
pub struct HypothesisStage {
    backends: Vec<Arc<dyn ChatBackend>>,
    target_language: String,
    retry_budget: u32,
    lexicon: RoleLexicon,
    system_prompt: String,
}

impl HypothesisStage {
    pub fn new(
        backends: Vec<Arc<dyn ChatBackend>>,
        target_language: &str,
        retry_budget: u32,
    ) -> Result<Self, HypothesisError> {
        if backends.len() < 2 {
            return Err(HypothesisError::TooFewBackends(backends.len()));
        }
        let mut seen = HashSet::new();
        for b in &backends {
            if !seen.insert(b.backend_id().to_string()) {
                return Err(HypothesisError::DuplicateBackend(
                    b.backend_id().to_string(),
                ));
            }
        }
        if target_language.trim().is_empty() {
            return Err(HypothesisError::EmptyTargetLanguage);
        }
        Ok(HypothesisStage {
            backends,
            target_language: target_language.to_string(),
            retry_budget,
            lexicon: RoleLexicon::default(),
            system_prompt: build_hypothesis_prompt(target_language),
        })
    }

    pub fn with_lexicon(mut self, lexicon: RoleLexicon) -> Self {
        self.lexicon = lexicon;
        self
    }

    pub fn system_prompt(&self) -> &str {
        &self.system_prompt
    }

    pub fn backend_ids(&self) -> Vec<String> {
        self.backends
            .iter()
            .map(|b| b.backend_id().to_string())
            .collect()
    }

    /// Translates `d` with every backend concurrently. Any backend failure
    /// fails the whole dialogue.
    pub fn generate(&self, d: &Dialogue) -> HypothesisOutcome {
        let user = render_dialogue_for_prompt(d);
        let results: Vec<(Result<AlignedTranslation, ExclusionCause>, CallTally)> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = self
                    .backends
                    .iter()
                    .map(|backend| scope.spawn(|| self.translate_with(backend.as_ref(), d, &user)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("hypothesis worker panicked"))
                    .collect()
            });

        let mut translations = Vec::with_capacity(results.len());
        let mut causes = BTreeMap::new();
        let mut tallies = Vec::with_capacity(results.len());
        for (result, tally) in results {
            match result {
                Ok(t) => translations.push(t),
                Err(cause) => {
                    causes.insert(tally.backend_id.clone(), cause);
                }
            }
            tallies.push(tally);
        }
        let result = if causes.is_empty() {
            Ok(translations)
        } else {
            Err(DialogueFailure { causes })
        };
        HypothesisOutcome { result, tallies }
    }

    fn translate_with(
        &self,
        backend: &dyn ChatBackend,
        d: &Dialogue,
        user: &str,
    ) -> (Result<AlignedTranslation, ExclusionCause>, CallTally) {
        let started = Instant::now();
        let mut tally = CallTally::new(backend.backend_id());
        let result = self.translate_inner(backend, d, user, &mut tally);
        tally.elapsed = started.elapsed();
        (result, tally)
    }

    fn translate_inner(
        &self,
        backend: &dyn ChatBackend,
        d: &Dialogue,
        user: &str,
        tally: &mut CallTally,
    ) -> Result<AlignedTranslation, ExclusionCause> {
        if let Some(budget) = backend.max_input_tokens() {
            if estimate_tokens(&self.system_prompt) + estimate_tokens(user) > budget {
                return Err(ExclusionCause::Oversize);
            }
        }
        let roles: Vec<Role> = d.roles().collect();
        let mut last_error: Option<AlignmentError> = None;
        for attempt in 0..=self.retry_budget {
            let content = match &last_error {
                None => user.to_string(),
                Some(e) => with_correction(user, &hypothesis_correction(&e.to_string(), &roles)),
            };
            if attempt > 0 {
                tally.corrective_retries += 1;
            }
            let request = ChatRequest::new(self.system_prompt.clone(), content)
                .expect("prompt and dialogue are non-empty");
            let completion = backend.call(&request);
            tally.requests += 1;
            tally.attempts += completion.attempts;
            match completion.outcome {
                ChatOutcome::Failure { kind, .. } => return Err(kind.into()),
                ChatOutcome::Success { text, .. } => {
                    match align_translation(
                        d,
                        &text,
                        backend.backend_id(),
                        &self.target_language,
                        &self.lexicon,
                    ) {
                        Ok(aligned) => return Ok(aligned),
                        Err(e) => {
                            tracing::debug!(backend = backend.backend_id(), dialogue = d.id(), error = %e, "misaligned hypothesis");
                            last_error = Some(e);
                        }
                    }
                }
            }
        }
        Err(ExclusionCause::Misalignment)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{
        FailureKind, Mangle, MockTranslator, ScriptRule, ScriptedBackend, ScriptedResponse,
    };
    use crate::corpus::Utterance;

    fn dialogue(n: usize) -> Dialogue {
        let utterances = (0..n)
            .map(|i| {
                let role = if i % 2 == 0 {
                    Role::Counselor
                } else {
                    Role::Client
                };
                Utterance::new(role, format!("発話{i}")).unwrap()
            })
            .collect();
        Dialogue::new("d1", "ja", utterances).unwrap()
    }

    #[test]
    fn prompt_slots() {
        assert!(build_hypothesis_prompt("English").contains("translate this data into English"));
        assert!(build_hypothesis_prompt("Chinese").contains("translate this data into Chinese"));
    }

    #[test]
    fn render_has_one_line_per_utterance() {
        let rendered = render_dialogue_for_prompt(&dialogue(3));
        assert_eq!(rendered.lines().count(), 3);
        assert!(rendered.starts_with("Counselor: 発話0\nClient: 発話1"));
    }

    #[test]
    fn aligns_matching_output() {
        let src = dialogue(5);
        let raw = "Counselor: a\nClient: b\nCounselor: c\nClient: d\nCounselor: e";
        let a = align_translation(&src, raw, "gpt", "English", &RoleLexicon::default()).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a.texts()[4], "e");
        assert_eq!(a.to_dialogue(&src).language(), "English");
    }

    #[test]
    fn count_mismatch() {
        let src = dialogue(5);
        let raw = "Counselor: a\nClient: b\nCounselor: c\nClient: d";
        assert_eq!(
            align_translation(&src, raw, "gpt", "English", &RoleLexicon::default()),
            Err(AlignmentError::CountMismatch {
                expected: 5,
                got: 4
            })
        );
    }

    #[test]
    fn role_swap_detected() {
        let src = dialogue(5);
        let raw = "Counselor: a\nClient: b\nClient: c\nClient: d\nCounselor: e";
        assert_eq!(
            align_translation(&src, raw, "gpt", "English", &RoleLexicon::default()),
            Err(AlignmentError::RoleSequenceMismatch { first_bad_index: 2 })
        );
    }

    #[test]
    fn preamble_is_unparseable() {
        let src = dialogue(1);
        let raw = "Here is the translation\nCounselor: a";
        assert!(matches!(
            align_translation(&src, raw, "gpt", "English", &RoleLexicon::default()),
            Err(AlignmentError::UnparseableOutput(_))
        ));
        let fenced = "```\nCounselor: a\n```";
        assert!(align_translation(&src, fenced, "gpt", "English", &RoleLexicon::default()).is_ok());
    }

    #[test]
    fn target_language_role_names_accepted() {
        let src = dialogue(2);
        let raw = "咨询师：你好\n来访者：嗯";
        let a = align_translation(&src, raw, "qwen", "Chinese", &RoleLexicon::default()).unwrap();
        assert_eq!(a.texts(), &["你好".to_string(), "嗯".to_string()]);
    }

    fn mocks(ids: &[&str]) -> Vec<Arc<dyn ChatBackend>> {
        ids.iter()
            .map(|id| Arc::new(MockTranslator::new(*id)) as Arc<dyn ChatBackend>)
            .collect()
    }

    #[test]
    fn three_clean_hypotheses_in_backend_order() {
        let stage = HypothesisStage::new(mocks(&["gpt", "gemini", "grok"]), "English", 2).unwrap();
        let src = dialogue(7);
        let out = stage.generate(&src);
        let hyps = out.result.unwrap();
        assert_eq!(
            hyps.iter().map(|h| h.backend_id()).collect::<Vec<_>>(),
            vec!["gpt", "gemini", "grok"]
        );
        assert!(hyps.iter().all(|h| h.len() == 7));
        assert!(out
            .tallies
            .iter()
            .all(|t| t.requests == 1 && t.corrective_retries == 0));
    }

    #[test]
    fn refusal_fails_whole_dialogue() {
        let mut backends = mocks(&["gpt", "gemini"]);
        backends.push(Arc::new(ScriptedBackend::new(
            Arc::new(MockTranslator::new("grok")),
            vec![ScriptRule::new(
                "発話0",
                vec![ScriptedResponse::Fail(FailureKind::SafetyRefusal)],
            )],
        )));
        let stage = HypothesisStage::new(backends, "English", 2).unwrap();
        let failure = stage.generate(&dialogue(3)).result.unwrap_err();
        assert_eq!(failure.causes.len(), 1);
        assert_eq!(failure.causes["grok"], ExclusionCause::SafetyRefusal);
    }

    #[test]
    fn misaligned_then_aligned_counts_one_retry() {
        let mut backends = mocks(&["gpt", "gemini"]);
        backends.push(Arc::new(ScriptedBackend::new(
            Arc::new(MockTranslator::new("grok")),
            vec![ScriptRule::new(
                "発話0",
                vec![ScriptedResponse::Mangled(Mangle::DropLastLine)],
            )],
        )));
        let stage = HypothesisStage::new(backends, "English", 2).unwrap();
        let out = stage.generate(&dialogue(4));
        assert!(out.result.is_ok());
        assert_eq!(out.tallies[2].corrective_retries, 1);
        assert_eq!(out.tallies[2].requests, 2);
    }

    #[test]
    fn persistent_misalignment_exhausts_budget() {
        let mut backends = mocks(&["gpt"]);
        backends.push(Arc::new(ScriptedBackend::new(
            Arc::new(MockTranslator::new("grok")),
            vec![ScriptRule::new(
                "発話",
                vec![ScriptedResponse::Mangled(Mangle::SwapRoleAt(1)); 3],
            )],
        )));
        let stage = HypothesisStage::new(backends, "English", 2).unwrap();
        let out = stage.generate(&dialogue(4));
        assert_eq!(
            out.result.unwrap_err().causes["grok"],
            ExclusionCause::Misalignment
        );
        assert_eq!(out.tallies[1].requests, 3);
    }

    #[test]
    fn oversize_prompt_skips_the_call() {
        let budgeted = Arc::new(MockTranslator::new("small").with_input_budget(Some(50)));
        let mut backends = mocks(&["gpt"]);
        backends.push(budgeted.clone());
        let stage = HypothesisStage::new(backends, "English", 2).unwrap();
        let out = stage.generate(&dialogue(40));
        assert_eq!(
            out.result.unwrap_err().causes["small"],
            ExclusionCause::Oversize
        );
        assert_eq!(budgeted.calls(), 0);
    }

    #[test]
    fn stage_validation() {
        assert!(matches!(
            HypothesisStage::new(mocks(&["a"]), "English", 0),
            Err(HypothesisError::TooFewBackends(1))
        ));
        assert!(matches!(
            HypothesisStage::new(mocks(&["a", "a"]), "English", 0),
            Err(HypothesisError::DuplicateBackend(_))
        ));
        assert!(HypothesisStage::new(mocks(&["a", "b"]), " ", 0).is_err());
    }
}
