//! Provider-agnostic chat-completion backends.
//!
//! Every backend answers a [`ChatRequest`] with a [`ChatOutcome`]; failures are
//! values, never panics or process aborts. [`HttpBackend`] talks to a real
//! provider through a configurable wire mapping, with retries and a per-backend
//! rate limiter. The mock backends are pure functions of their input and are
//! what the test suites run against.

mod classify;
mod clock;
mod config;
mod http;
mod mock;
mod ratelimit;
mod replay;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use classify::{
    classify_completion, classify_failure, ProviderSignal, RefusalPhrases, TransportErrorKind,
};
pub use clock::{Clock, SimClock, SystemClock};
pub use config::{
    BackendConfig, BackendKind, FixtureConfig, FixtureMode, SystemPlacement, WireMapping,
};
pub use http::{
    HttpBackend, HttpRequest, HttpResponse, ReqwestTransport, RetryPolicy, Transport,
    TransportError,
};
pub use mock::{
    Mangle, MockRefiner, MockTranslator, RefinerMode, ScriptRule, ScriptedBackend, ScriptedResponse,
};
pub use ratelimit::RateLimiter;
pub use replay::{fixture_key, RecordReplayBackend};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend {backend_id:?}: {message}")]
    InvalidConfig { backend_id: String, message: String },
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
}

/// A system prompt plus a single user message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    system_prompt: String,
    user_content: String,
}

impl ChatRequest {
    pub fn new(
        system_prompt: impl Into<String>,
        user_content: impl Into<String>,
    ) -> Result<Self, BackendError> {
        let system_prompt = system_prompt.into();
        let user_content = user_content.into();
        if system_prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty system prompt".into()));
        }
        if user_content.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty user content".into()));
        }
        Ok(ChatRequest {
            system_prompt,
            user_content,
        })
    }

    pub fn system_prompt(&self) -> &str {
        &self.system_prompt
    }

    pub fn user_content(&self) -> &str {
        &self.user_content
    }
}

/// Why a completion failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureKind {
    /// Timeouts, 5xx, 429: worth retrying.
    Transient,
    /// The provider's content policy blocked the request or the model refused.
    SafetyRefusal,
    /// Input or output exceeded the model's context/output budget.
    Oversize,
    /// The provider answered with something that could not be interpreted.
    Malformed,
}

impl FailureKind {
    pub fn is_retryable(self) -> bool {
        self == FailureKind::Transient
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ChatOutcome {
    Success {
        text: String,
        finish_reason: Option<String>,
    },
    Failure {
        kind: FailureKind,
        detail: String,
    },
}

impl ChatOutcome {
    /// A success; empty text is reported as a malformed failure instead.
    pub fn success(text: impl Into<String>, finish_reason: Option<String>) -> Self {
        let text = text.into();
        if text.trim().is_empty() {
            return ChatOutcome::failure(FailureKind::Malformed, "empty completion text");
        }
        ChatOutcome::Success {
            text,
            finish_reason,
        }
    }

    pub fn failure(kind: FailureKind, detail: impl Into<String>) -> Self {
        ChatOutcome::Failure {
            kind,
            detail: detail.into(),
        }
    }

    pub fn text(&self) -> Option<&str> {
        match self {
            ChatOutcome::Success { text, .. } => Some(text),
            ChatOutcome::Failure { .. } => None,
        }
    }

    pub fn failure_kind(&self) -> Option<FailureKind> {
        match self {
            ChatOutcome::Success { .. } => None,
            ChatOutcome::Failure { kind, .. } => Some(*kind),
        }
    }
}

/// Outcome of one `complete` call along with how many network attempts it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub outcome: ChatOutcome,
    pub attempts: u32,
    pub elapsed: Duration,
}

impl Completion {
    pub fn single(outcome: ChatOutcome) -> Self {
        Completion {
            outcome,
            attempts: 1,
            elapsed: Duration::ZERO,
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    /// Prompt budget in estimated tokens, if the backend has one.
    fn max_input_tokens(&self) -> Option<u64> {
        None
    }

    fn call(&self, request: &ChatRequest) -> Completion;

    fn complete(&self, request: &ChatRequest) -> ChatOutcome {
        self.call(request).outcome
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }

    fn max_input_tokens(&self) -> Option<u64> {
        (**self).max_input_tokens()
    }

    fn call(&self, request: &ChatRequest) -> Completion {
        (**self).call(request)
    }
}

/// Builds the backend described by `config`.
pub fn build_backend(config: &BackendConfig) -> Result<Arc<dyn ChatBackend>, BackendError> {
    config.validate()?;
    let base: Arc<dyn ChatBackend> = match &config.kind {
        BackendKind::Http => Arc::new(HttpBackend::from_config(config)?),
        BackendKind::MockTranslator => Arc::new(
            MockTranslator::new(&config.backend_id).with_input_budget(config.max_input_tokens),
        ),
        BackendKind::MockRefiner => Arc::new(
            MockRefiner::new(&config.backend_id, RefinerMode::Fuse)
                .with_input_budget(config.max_input_tokens),
        ),
        BackendKind::MockEcho { hypothesis } => Arc::new(
            MockRefiner::new(&config.backend_id, RefinerMode::Echo(*hypothesis))
                .with_input_budget(config.max_input_tokens),
        ),
    };
    Ok(match &config.fixtures {
        None => base,
        Some(fixtures) => Arc::new(RecordReplayBackend::new(
            base,
            fixtures.mode,
            fixtures.dir.clone(),
        )),
    })
}
