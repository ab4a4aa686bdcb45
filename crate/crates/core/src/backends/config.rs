use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use url::Url;

use super::{BackendError, RefusalPhrases};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum BackendKind {
    #[default]
    Http,
    /// Deterministic offline translator (stage 1).
    MockTranslator,
    /// Deterministic offline refiner that fuses candidates (stage 2).
    MockRefiner,
    /// Offline refiner that copies candidate `hypothesis` (1-based) verbatim.
    MockEcho { hypothesis: usize },
}

/// Where the system prompt goes in the provider request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemPlacement {
    /// As the first `{"role": "system"}` entry of `messages`.
    #[default]
    Message,
    /// As a top-level field named by `system_field`.
    Field,
}

/// Request/response mapping for one provider's chat-completion API.
///
/// Defaults describe the OpenAI-compatible shape used by most providers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WireMapping {
    pub system_placement: SystemPlacement,
    pub system_field: String,
    pub messages_field: String,
    pub model_field: String,
    pub max_tokens_field: String,
    /// JSON pointer to the completion text in a 2xx response.
    pub text_pointer: String,
    pub finish_reason_pointer: String,
    pub auth_header: String,
    pub auth_prefix: String,
    pub extra_headers: BTreeMap<String, String>,
}

impl Default for WireMapping {
    fn default() -> Self {
        WireMapping::openai()
    }
}

impl WireMapping {
    pub fn openai() -> Self {
        WireMapping {
            system_placement: SystemPlacement::Message,
            system_field: "system".into(),
            messages_field: "messages".into(),
            model_field: "model".into(),
            max_tokens_field: "max_tokens".into(),
            text_pointer: "/choices/0/message/content".into(),
            finish_reason_pointer: "/choices/0/finish_reason".into(),
            auth_header: "Authorization".into(),
            auth_prefix: "Bearer ".into(),
            extra_headers: BTreeMap::new(),
        }
    }

    pub fn anthropic() -> Self {
        let mut extra_headers = BTreeMap::new();
        extra_headers.insert("anthropic-version".to_string(), "2023-06-01".to_string());
        WireMapping {
            system_placement: SystemPlacement::Field,
            text_pointer: "/content/0/text".into(),
            finish_reason_pointer: "/stop_reason".into(),
            auth_header: "x-api-key".into(),
            auth_prefix: String::new(),
            extra_headers,
            ..WireMapping::openai()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureMode {
    Record,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub mode: FixtureMode,
    pub dir: PathBuf,
}

fn default_timeout() -> f64 {
    300.0
}

fn default_retries() -> u32 {
    3
}

fn default_rpm() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub backend_id: String,
    #[serde(default, flatten)]
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<Url>,
    #[serde(default)]
    pub model_name: String,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_rpm")]
    pub requests_per_minute: f64,
    /// Output token budget sent to the provider; omitted when unset.
    #[serde(default)]
    pub max_output_tokens: Option<u32>,
    /// Prompt budget in estimated tokens; larger prompts fail as `Oversize`
    /// without a network call.
    #[serde(default)]
    pub max_input_tokens: Option<u64>,
    /// Passed through verbatim as top-level request fields. Empty means
    /// provider defaults.
    #[serde(default)]
    pub generation_params: serde_json::Map<String, serde_json::Value>,
    /// Environment variable holding the credential. Defaults to
    /// `<BACKEND_ID>_API_KEY`.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub wire: WireMapping,
    #[serde(default)]
    pub refusal_phrases: RefusalPhrases,
    #[serde(default)]
    pub fixtures: Option<FixtureConfig>,
}

impl BackendConfig {
    pub fn mock(backend_id: impl Into<String>, kind: BackendKind) -> Self {
        BackendConfig {
            backend_id: backend_id.into(),
            kind,
            endpoint: None,
            model_name: String::new(),
            request_timeout_secs: default_timeout(),
            max_retries: default_retries(),
            requests_per_minute: default_rpm(),
            max_output_tokens: None,
            max_input_tokens: None,
            generation_params: serde_json::Map::new(),
            api_key_env: None,
            wire: WireMapping::default(),
            refusal_phrases: RefusalPhrases::default(),
            fixtures: None,
        }
    }

    pub fn api_key_env_name(&self) -> String {
        self.api_key_env.clone().unwrap_or_else(|| {
            let upper: String = self
                .backend_id
                .chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() {
                        c.to_ascii_uppercase()
                    } else {
                        '_'
                    }
                })
                .collect();
            format!("{upper}_API_KEY")
        })
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let invalid = |message: &str| BackendError::InvalidConfig {
            backend_id: self.backend_id.clone(),
            message: message.to_string(),
        };
        if self.backend_id.trim().is_empty() {
            return Err(invalid("backend_id is empty"));
        }
        if !(self.requests_per_minute.is_finite() && self.requests_per_minute > 0.0) {
            return Err(invalid("requests_per_minute must be positive"));
        }
        if !(self.request_timeout_secs.is_finite() && self.request_timeout_secs > 0.0) {
            return Err(invalid("request_timeout_secs must be positive"));
        }
        if let BackendKind::MockEcho { hypothesis } = self.kind {
            if hypothesis == 0 {
                return Err(invalid("mock-echo hypothesis index is 1-based"));
            }
        }
        if self.kind == BackendKind::Http {
            if self.endpoint.is_none() {
                return Err(invalid("http backends need an endpoint"));
            }
            if self.model_name.trim().is_empty() {
                return Err(invalid("http backends need a model_name"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_shape() {
        let cfg: BackendConfig = toml_like(
            r#"{"backend_id":"gpt","type":"http","endpoint":"https://api.example.com/v1/chat/completions","model_name":"m"}"#,
        );
        assert_eq!(cfg.kind, BackendKind::Http);
        assert!(cfg.generation_params.is_empty());
        assert_eq!(cfg.wire, WireMapping::openai());
        cfg.validate().unwrap();

        let echo: BackendConfig =
            toml_like(r#"{"backend_id":"r","type":"mock-echo","hypothesis":1}"#);
        assert_eq!(echo.kind, BackendKind::MockEcho { hypothesis: 1 });
    }

    fn toml_like(json: &str) -> BackendConfig {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn validation() {
        let mut cfg = BackendConfig::mock("a", BackendKind::Http);
        assert!(cfg.validate().is_err());
        cfg.endpoint = Some("http://localhost:1/".parse().unwrap());
        cfg.model_name = "m".into();
        cfg.validate().unwrap();
        cfg.requests_per_minute = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn api_key_env_default() {
        let cfg = BackendConfig::mock("gemini-2.5", BackendKind::MockTranslator);
        assert_eq!(cfg.api_key_env_name(), "GEMINI_2_5_API_KEY");
    }
}
