//! Mapping provider responses to [`FailureKind`].

use serde::{Deserialize, Serialize};

use super::FailureKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportErrorKind {
    Timeout,
    Connect,
    Other,
}

/// A non-success observation from a provider.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderSignal<'a> {
    /// No HTTP response at all.
    Transport(TransportErrorKind),
    /// An HTTP response with a non-2xx status.
    Http { status: u16, body: &'a str },
    /// A 2xx response whose payload could not be interpreted.
    Unparseable { body: &'a str },
    /// A 2xx response that parsed but signals a problem.
    Completed {
        finish_reason: Option<&'a str>,
        text: Option<&'a str>,
    },
}

/// Case-insensitive substrings that mark a completion as a refusal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RefusalPhrases(Vec<String>);

impl Default for RefusalPhrases {
    fn default() -> Self {
        RefusalPhrases::new([
            "I'm sorry, but I can't",
            "I’m sorry, but I can’t",
            "I cannot assist with",
            "I can't assist with",
            "I can't help with",
            "I cannot help with",
            "I'm unable to help with",
            "I am unable to provide",
            "I won't be able to translate",
            "I cannot translate this",
            "I can't translate this",
            "申し訳ありませんが、この",
            "抱歉，我无法",
            "很抱歉，我不能",
        ])
    }
}

impl RefusalPhrases {
    pub fn new<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        RefusalPhrases(phrases.into_iter().map(Into::into).collect())
    }

    pub fn matches(&self, text: &str) -> bool {
        let folded = text.to_lowercase();
        self.0.iter().any(|p| folded.contains(&p.to_lowercase()))
    }
}

const CONTEXT_LENGTH_MARKERS: &[&str] = &[
    "context_length_exceeded",
    "context length",
    "maximum context",
    "context window",
    "too many tokens",
    "prompt is too long",
    "input is too long",
    "request too large",
    "exceeds the maximum",
    "token limit",
    "string_above_max_length",
];

const SAFETY_MARKERS: &[&str] = &[
    "content_filter",
    "content_policy",
    "content policy",
    "content management policy",
    "responsible ai",
    "safety",
    "prohibited_content",
    "blocklist",
    "blocked",
    "moderation",
    "data_inspection_failed",
    "inappropriate content",
];

const SAFETY_FINISH_REASONS: &[&str] = &[
    "content_filter",
    "safety",
    "refusal",
    "prohibited_content",
    "blocklist",
    "spii",
    "recitation",
    "sensitive",
];

const LENGTH_FINISH_REASONS: &[&str] = &["length", "max_tokens", "max_output_tokens"];

fn contains_any(haystack: &str, needles: &[&str]) -> bool {
    needles.iter().any(|n| haystack.contains(n))
}

/// Inspects a parsed 2xx completion; `None` means it is a usable success.
pub fn classify_completion(
    finish_reason: Option<&str>,
    text: Option<&str>,
    phrases: &RefusalPhrases,
) -> Option<FailureKind> {
    let reason = finish_reason.map(str::to_lowercase);
    if let Some(r) = reason.as_deref() {
        if SAFETY_FINISH_REASONS.contains(&r) {
            return Some(FailureKind::SafetyRefusal);
        }
        if LENGTH_FINISH_REASONS.contains(&r) {
            return Some(FailureKind::Oversize);
        }
    }
    match text {
        None => Some(FailureKind::Malformed),
        Some(t) if t.trim().is_empty() => Some(FailureKind::Malformed),
        Some(t) if phrases.matches(t) => Some(FailureKind::SafetyRefusal),
        Some(_) => None,
    }
}

/// Total mapping from a provider signal to a failure kind.
///
/// Context-length markers win over everything else, then content-policy
/// markers, then the transport/status classes. A 2xx `Completed` signal that
/// `classify_completion` accepts is still reported as `Malformed` here, since
/// this function is only called for non-successes.
pub fn classify_failure(signal: &ProviderSignal<'_>, phrases: &RefusalPhrases) -> FailureKind {
    match signal {
        ProviderSignal::Transport(_) => FailureKind::Transient,
        ProviderSignal::Http { status, body } => {
            let lower = body.to_lowercase();
            if *status == 413 || contains_any(&lower, CONTEXT_LENGTH_MARKERS) {
                FailureKind::Oversize
            } else if contains_any(&lower, SAFETY_MARKERS) || phrases.matches(body) {
                FailureKind::SafetyRefusal
            } else if *status == 429 || *status == 408 || (500..600).contains(status) {
                FailureKind::Transient
            } else {
                FailureKind::Malformed
            }
        }
        ProviderSignal::Unparseable { .. } => FailureKind::Malformed,
        ProviderSignal::Completed {
            finish_reason,
            text,
        } => classify_completion(*finish_reason, *text, phrases).unwrap_or(FailureKind::Malformed),
    }
}
