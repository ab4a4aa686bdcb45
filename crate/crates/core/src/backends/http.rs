use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{
    classify_completion, classify_failure, BackendConfig, BackendError, ChatBackend, ChatOutcome,
    ChatRequest, Clock, Completion, FailureKind, ProviderSignal, RateLimiter, RefusalPhrases,
    SystemClock, SystemPlacement, TransportErrorKind, WireMapping,
};

#[derive(Debug, Clone, PartialEq)]
pub struct HttpRequest {
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: Value,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError {
    pub kind: TransportErrorKind,
    pub detail: String,
}

/// Sends one HTTP request. Implementations must not retry.
pub trait Transport: Send + Sync {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self, reqwest::Error> {
        Ok(ReqwestTransport {
            client: reqwest::blocking::Client::builder().build()?,
        })
    }
}

impl Transport for ReqwestTransport {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let mut builder = self
            .client
            .post(&request.url)
            .timeout(request.timeout)
            .json(&request.body);
        for (name, value) in &request.headers {
            builder = builder.header(name, value);
        }
        let response = builder.send().map_err(|e| TransportError {
            kind: if e.is_timeout() {
                TransportErrorKind::Timeout
            } else if e.is_connect() {
                TransportErrorKind::Connect
            } else {
                TransportErrorKind::Other
            },
            detail: e.to_string(),
        })?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| TransportError {
            kind: if e.is_timeout() {
                TransportErrorKind::Timeout
            } else {
                TransportErrorKind::Other
            },
            detail: e.to_string(),
        })?;
        Ok(HttpResponse { status, body })
    }
}

/// Exponential backoff with jitter: attempt `k` (0-based) waits a uniformly
/// random duration in `[d/2, d]` where `d = min(max_delay, base_delay * 2^k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl RetryPolicy {
    pub fn new(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(60),
        }
    }

    pub fn delay_for(&self, attempt: u32, rng: &mut impl Rng) -> Duration {
        let exp = self
            .base_delay
            .saturating_mul(2u32.saturating_pow(attempt.min(30)));
        let capped = exp.min(self.max_delay);
        capped.mul_f64(rng.random_range(0.5..=1.0))
    }
}

/// Chat-completion client for an HTTP+JSON provider.
pub struct HttpBackend {
    backend_id: String,
    url: String,
    model_name: String,
    timeout: Duration,
    max_output_tokens: Option<u32>,
    max_input_tokens: Option<u64>,
    generation_params: serde_json::Map<String, Value>,
    api_key: Option<String>,
    wire: WireMapping,
    phrases: RefusalPhrases,
    retry: RetryPolicy,
    limiter: RateLimiter,
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
}

impl HttpBackend {
    pub fn from_config(config: &BackendConfig) -> Result<Self, BackendError> {
        let transport = ReqwestTransport::new().map_err(|e| BackendError::InvalidConfig {
            backend_id: config.backend_id.clone(),
            message: format!("cannot build HTTP client: {e}"),
        })?;
        Self::with_transport(
            config,
            Arc::new(transport),
            Arc::new(SystemClock::default()),
        )
    }

    pub fn with_transport(
        config: &BackendConfig,
        transport: Arc<dyn Transport>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, BackendError> {
        config.validate()?;
        let url = config
            .endpoint
            .as_ref()
            .map(|u| u.to_string())
            .ok_or_else(|| BackendError::InvalidConfig {
                backend_id: config.backend_id.clone(),
                message: "missing endpoint".into(),
            })?;
        let api_key = std::env::var(config.api_key_env_name()).ok();
        Ok(HttpBackend {
            backend_id: config.backend_id.clone(),
            url,
            model_name: config.model_name.clone(),
            timeout: Duration::from_secs_f64(config.request_timeout_secs),
            max_output_tokens: config.max_output_tokens,
            max_input_tokens: config.max_input_tokens,
            generation_params: config.generation_params.clone(),
            api_key,
            wire: config.wire.clone(),
            phrases: config.refusal_phrases.clone(),
            retry: RetryPolicy::new(config.max_retries),
            limiter: RateLimiter::per_minute(config.requests_per_minute),
            transport,
            clock,
        })
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    /// Builds the provider request body for `request`.
    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let wire = &self.wire;
        let user = json!({"role": "user", "content": request.user_content()});
        let mut body = serde_json::Map::new();
        body.insert(wire.model_field.clone(), json!(self.model_name));
        match wire.system_placement {
            SystemPlacement::Message => {
                let system = json!({"role": "system", "content": request.system_prompt()});
                body.insert(wire.messages_field.clone(), json!([system, user]));
            }
            SystemPlacement::Field => {
                body.insert(wire.system_field.clone(), json!(request.system_prompt()));
                body.insert(wire.messages_field.clone(), json!([user]));
            }
        }
        if let Some(max) = self.max_output_tokens {
            body.insert(wire.max_tokens_field.clone(), json!(max));
        }
        for (k, v) in &self.generation_params {
            body.insert(k.clone(), v.clone());
        }
        Value::Object(body)
    }

    fn http_request(&self, request: &ChatRequest) -> HttpRequest {
        let mut headers = vec![("Content-Type".to_string(), "application/json".to_string())];
        if let Some(key) = &self.api_key {
            headers.push((
                self.wire.auth_header.clone(),
                format!("{}{}", self.wire.auth_prefix, key),
            ));
        }
        for (k, v) in &self.wire.extra_headers {
            headers.push((k.clone(), v.clone()));
        }
        HttpRequest {
            url: self.url.clone(),
            headers,
            body: self.request_body(request),
            timeout: self.timeout,
        }
    }

    /// Interprets one provider response (or transport error).
    pub fn interpret(&self, response: Result<HttpResponse, TransportError>) -> ChatOutcome {
        let response = match response {
            Ok(r) => r,
            Err(e) => {
                let kind = classify_failure(&ProviderSignal::Transport(e.kind), &self.phrases);
                return ChatOutcome::failure(kind, e.detail);
            }
        };
        if !(200..300).contains(&response.status) {
            let signal = ProviderSignal::Http {
                status: response.status,
                body: &response.body,
            };
            let kind = classify_failure(&signal, &self.phrases);
            return ChatOutcome::failure(
                kind,
                format!(
                    "HTTP {}: {}",
                    response.status,
                    truncate(&response.body, 500)
                ),
            );
        }
        let payload: Value = match serde_json::from_str(&response.body) {
            Ok(v) => v,
            Err(e) => {
                let kind = classify_failure(
                    &ProviderSignal::Unparseable {
                        body: &response.body,
                    },
                    &self.phrases,
                );
                return ChatOutcome::failure(kind, format!("unparseable response: {e}"));
            }
        };
        let text = payload
            .pointer(&self.wire.text_pointer)
            .and_then(Value::as_str);
        let finish_reason = payload
            .pointer(&self.wire.finish_reason_pointer)
            .and_then(Value::as_str);
        match classify_completion(finish_reason, text, &self.phrases) {
            None => {
                ChatOutcome::success(text.unwrap_or_default(), finish_reason.map(str::to_string))
            }
            Some(kind) => ChatOutcome::failure(
                kind,
                format!(
                    "finish_reason={}; text={}",
                    finish_reason.unwrap_or("-"),
                    truncate(text.unwrap_or("-"), 200)
                ),
            ),
        }
    }
}

fn truncate(s: &str, max_chars: usize) -> String {
    if s.chars().count() <= max_chars {
        s.to_string()
    } else {
        let mut t: String = s.chars().take(max_chars).collect();
        t.push('…');
        t
    }
}

impl ChatBackend for HttpBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn max_input_tokens(&self) -> Option<u64> {
        self.max_input_tokens
    }

    fn call(&self, request: &ChatRequest) -> Completion {
        let started = self.clock.now();
        let http_request = self.http_request(request);
        let mut rng = rand::rng();
        let mut attempts = 0;
        loop {
            self.limiter.acquire(self.clock.as_ref());
            attempts += 1;
            let outcome = self.interpret(self.transport.send(&http_request));
            let retry = match &outcome {
                ChatOutcome::Failure {
                    kind: FailureKind::Transient,
                    detail,
                } if attempts <= self.retry.max_retries => {
                    warn!(backend = %self.backend_id, attempts, %detail, "transient failure, retrying");
                    true
                }
                _ => false,
            };
            if !retry {
                debug!(backend = %self.backend_id, attempts, "completion finished");
                return Completion {
                    outcome,
                    attempts,
                    elapsed: self.clock.now().saturating_sub(started),
                };
            }
            self.clock
                .sleep(self.retry.delay_for(attempts - 1, &mut rng));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendKind, SimClock};
    use std::sync::Mutex;

    /// Replays a fixed list of responses and records every request.
    struct ScriptedTransport {
        responses: Mutex<Vec<Result<HttpResponse, TransportError>>>,
        requests: Mutex<Vec<HttpRequest>>,
    }

    impl ScriptedTransport {
        fn new(mut responses: Vec<Result<HttpResponse, TransportError>>) -> Arc<Self> {
            responses.reverse();
            Arc::new(ScriptedTransport {
                responses: Mutex::new(responses),
                requests: Mutex::new(Vec::new()),
            })
        }

        fn sent(&self) -> usize {
            self.requests.lock().unwrap().len()
        }
    }

    impl Transport for ScriptedTransport {
        fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
            self.requests.lock().unwrap().push(request.clone());
            self.responses
                .lock()
                .unwrap()
                .pop()
                .expect("transport called more often than scripted")
        }
    }

    fn ok(text: &str, finish: &str) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse {
            status: 200,
            body: json!({"choices": [{"message": {"content": text}, "finish_reason": finish}]})
                .to_string(),
        })
    }

    fn status(code: u16, body: &str) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse {
            status: code,
            body: body.to_string(),
        })
    }

    fn config(max_retries: u32) -> BackendConfig {
        let mut cfg = BackendConfig::mock("gpt", BackendKind::Http);
        cfg.endpoint = Some("https://provider.test/v1/chat/completions".parse().unwrap());
        cfg.model_name = "model-x".into();
        cfg.max_retries = max_retries;
        cfg.requests_per_minute = 600.0;
        cfg.api_key_env = Some("FUSION_TEST_UNSET_KEY".into());
        cfg
    }

    fn backend(transport: Arc<ScriptedTransport>, retries: u32) -> (HttpBackend, Arc<SimClock>) {
        let clock = Arc::new(SimClock::new());
        let b = HttpBackend::with_transport(&config(retries), transport, clock.clone()).unwrap();
        (b, clock)
    }

    fn req() -> ChatRequest {
        ChatRequest::new("system", "Counselor: hi").unwrap()
    }

    #[test]
    fn retries_once_after_429() {
        let t = ScriptedTransport::new(vec![
            status(429, "rate limited"),
            ok("Counselor: Hi", "stop"),
        ]);
        let (b, clock) = backend(t.clone(), 3);
        let c = b.call(&req());
        assert_eq!(c.outcome.text(), Some("Counselor: Hi"));
        assert_eq!(c.attempts, 2);
        assert_eq!(t.sent(), 2);
        // one backoff sleep in [0.5s, 1s] plus the limiter spacing (0.1s)
        let sleeps = clock.sleeps();
        assert!(sleeps
            .iter()
            .any(|d| *d >= Duration::from_millis(500) && *d <= Duration::from_secs(1)));
    }

    #[test]
    fn refusal_is_never_retried() {
        let t = ScriptedTransport::new(vec![ok("partial", "content_filter")]);
        let (b, _) = backend(t.clone(), 5);
        let c = b.call(&req());
        assert_eq!(c.outcome.failure_kind(), Some(FailureKind::SafetyRefusal));
        assert_eq!(c.attempts, 1);
        assert_eq!(t.sent(), 1);
    }

    #[test]
    fn oversize_and_malformed_not_retried() {
        let t = ScriptedTransport::new(vec![status(
            400,
            r#"{"error":{"code":"context_length_exceeded"}}"#,
        )]);
        let (b, _) = backend(t.clone(), 5);
        assert_eq!(
            b.complete(&req()).failure_kind(),
            Some(FailureKind::Oversize)
        );
        assert_eq!(t.sent(), 1);

        let t = ScriptedTransport::new(vec![status(200, "not json")]);
        let (b, _) = backend(t.clone(), 5);
        assert_eq!(
            b.complete(&req()).failure_kind(),
            Some(FailureKind::Malformed)
        );
        assert_eq!(t.sent(), 1);
    }

    #[test]
    fn retry_budget_is_respected() {
        let t = ScriptedTransport::new(vec![
            status(503, ""),
            status(503, ""),
            Err(TransportError {
                kind: TransportErrorKind::Timeout,
                detail: "timed out".into(),
            }),
        ]);
        let (b, _) = backend(t.clone(), 2);
        let c = b.call(&req());
        assert_eq!(c.outcome.failure_kind(), Some(FailureKind::Transient));
        assert_eq!(c.attempts, 3);
        assert_eq!(t.sent(), 3);
    }

    #[test]
    fn zero_retries_means_one_attempt() {
        let t = ScriptedTransport::new(vec![status(500, "")]);
        let (b, _) = backend(t.clone(), 0);
        assert_eq!(b.call(&req()).attempts, 1);
    }

    #[test]
    fn request_shapes() {
        let t = ScriptedTransport::new(vec![ok("x", "stop")]);
        let (b, _) = backend(t.clone(), 0);
        let b = b.with_api_key("sk-test");
        b.call(&req());
        let sent = t.requests.lock().unwrap()[0].clone();
        assert_eq!(sent.body["model"], "model-x");
        assert_eq!(sent.body["messages"][0]["role"], "system");
        assert_eq!(sent.body["messages"][1]["content"], "Counselor: hi");
        assert!(sent.body.get("max_tokens").is_none());
        assert!(sent.body.get("temperature").is_none());
        assert!(sent
            .headers
            .contains(&("Authorization".to_string(), "Bearer sk-test".to_string())));

        let mut cfg = config(0);
        cfg.wire = WireMapping::anthropic();
        cfg.max_output_tokens = Some(64000);
        cfg.generation_params.insert("top_k".into(), json!(5));
        let t = ScriptedTransport::new(vec![]);
        let b = HttpBackend::with_transport(&cfg, t, Arc::new(SimClock::new())).unwrap();
        let body = b.request_body(&req());
        assert_eq!(body["system"], "system");
        assert_eq!(body["messages"].as_array().unwrap().len(), 1);
        assert_eq!(body["max_tokens"], 64000);
        assert_eq!(body["top_k"], 5);
    }

    #[test]
    fn backoff_grows_and_caps() {
        let policy = RetryPolicy::new(10);
        let mut rng = rand::rng();
        for attempt in 0..10 {
            let d = policy.delay_for(attempt, &mut rng);
            let full = Duration::from_secs(1u64 << attempt).min(policy.max_delay);
            assert!(d >= full / 2 && d <= full, "attempt {attempt}: {d:?}");
        }
    }
}
