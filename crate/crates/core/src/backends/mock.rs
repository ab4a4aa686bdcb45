//! Deterministic offline backends.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

use super::{ChatBackend, ChatOutcome, ChatRequest, Completion, FailureKind};
use crate::corpus::{parse_lines, Role, RoleLexicon};
use crate::prompts::strip_correction;
use crate::text::sha256_hex;

/// Stage 1 mock: echoes every `Role: text` line of the user message with the
/// text tagged by backend id and a hash of the message.
///
/// Output is a pure function of `(backend_id, user message without any
/// correction block)`.
pub struct MockTranslator {
    backend_id: String,
    max_input_tokens: Option<u64>,
    calls: AtomicUsize,
}

impl MockTranslator {
    pub fn new(backend_id: impl Into<String>) -> Self {
        MockTranslator {
            backend_id: backend_id.into(),
            max_input_tokens: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_input_budget(mut self, budget: Option<u64>) -> Self {
        self.max_input_tokens = budget;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// The translation this mock produces for `user_content`.
    pub fn translate(&self, user_content: &str) -> ChatOutcome {
        let base = strip_correction(user_content);
        let utterances = match parse_lines(base, &RoleLexicon::default()) {
            Ok(u) => u,
            Err(e) => return ChatOutcome::failure(FailureKind::Malformed, e.to_string()),
        };
        let tag = &sha256_hex(&[&self.backend_id, base])[..8];
        let lines: Vec<String> = utterances
            .iter()
            .map(|u| format!("{}: {} [{}:{}]", u.role(), u.text(), self.backend_id, tag))
            .collect();
        ChatOutcome::success(lines.join("\n"), Some("stop".into()))
    }
}

impl ChatBackend for MockTranslator {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn max_input_tokens(&self) -> Option<u64> {
        self.max_input_tokens
    }

    fn call(&self, request: &ChatRequest) -> Completion {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Completion::single(self.translate(request.user_content()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefinerMode {
    /// Copy hypothesis `k` (1-based) as the final translation.
    Echo(usize),
    /// Pick a candidate by hashing the source and mark it as refined.
    Fuse,
}

/// Stage 2 mock: reads the JSON record list from the user message and answers
/// with one `{analysis, final}` object per record.
pub struct MockRefiner {
    backend_id: String,
    mode: RefinerMode,
    max_input_tokens: Option<u64>,
    calls: AtomicUsize,
}

impl MockRefiner {
    pub fn new(backend_id: impl Into<String>, mode: RefinerMode) -> Self {
        MockRefiner {
            backend_id: backend_id.into(),
            mode,
            max_input_tokens: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_input_budget(mut self, budget: Option<u64>) -> Self {
        self.max_input_tokens = budget;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn refine(&self, user_content: &str) -> ChatOutcome {
        let base = strip_correction(user_content);
        let records: Vec<serde_json::Map<String, Value>> = match serde_json::from_str(base) {
            Ok(r) => r,
            Err(e) => {
                return ChatOutcome::failure(FailureKind::Malformed, format!("bad input: {e}"))
            }
        };
        let mut out = Vec::with_capacity(records.len());
        for record in &records {
            let hyp = |k: usize| {
                record
                    .get(&format!("hypothesis{k}"))
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_string()
            };
            let count = (1..)
                .take_while(|k| record.contains_key(&format!("hypothesis{k}")))
                .count();
            let (analysis, final_text) = match self.mode {
                RefinerMode::Echo(k) => (format!("Copied hypothesis{k}."), hyp(k)),
                RefinerMode::Fuse => {
                    let source = record.get("source").and_then(Value::as_str).unwrap_or("");
                    let digest = sha256_hex(&[&self.backend_id, source]);
                    let pick =
                        usize::from_str_radix(&digest[..4], 16).unwrap_or(0) % count.max(1) + 1;
                    (
                        format!("Compared {count} candidates; hypothesis{pick} used as the base."),
                        format!("{} (refined)", hyp(pick)),
                    )
                }
            };
            out.push(json!({"analysis": analysis, "final": final_text}));
        }
        ChatOutcome::success(Value::Array(out).to_string(), Some("stop".into()))
    }
}

impl ChatBackend for MockRefiner {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn max_input_tokens(&self) -> Option<u64> {
        self.max_input_tokens
    }

    fn call(&self, request: &ChatRequest) -> Completion {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Completion::single(self.refine(request.user_content()))
    }
}

/// Ways to damage an otherwise valid output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mangle {
    /// Drop the last `Role: text` line.
    DropLastLine,
    /// Swap Counselor/Client on line `i` (0-based, ignoring blank lines).
    SwapRoleAt(usize),
    /// Drop the last element of a JSON array.
    DropLastRecord,
    /// Blank the `final` field of JSON record `i`.
    EmptyFinalAt(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptedResponse {
    Fail(FailureKind),
    Raw(String),
    Mangled(Mangle),
    /// Forward to the wrapped backend unchanged.
    Pass,
}

/// Responses for calls whose user message (minus any correction block)
/// contains `when_contains`. The n-th matching call for a given message gets
/// `responses[n]`; once exhausted, calls pass through.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptRule {
    pub when_contains: String,
    pub responses: Vec<ScriptedResponse>,
}

impl ScriptRule {
    pub fn new(when_contains: impl Into<String>, responses: Vec<ScriptedResponse>) -> Self {
        ScriptRule {
            when_contains: when_contains.into(),
            responses,
        }
    }
}

/// Wraps a backend and overrides selected calls according to a script.
///
/// Counters are keyed by message content, so the script behaves the same no
/// matter how calls for different dialogues interleave.
pub struct ScriptedBackend {
    inner: Arc<dyn ChatBackend>,
    rules: Vec<ScriptRule>,
    counters: Mutex<HashMap<(usize, String), usize>>,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(inner: Arc<dyn ChatBackend>, rules: Vec<ScriptRule>) -> Self {
        ScriptedBackend {
            inner,
            rules,
            counters: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn scripted(&self, user_content: &str) -> Option<ScriptedResponse> {
        let base = strip_correction(user_content);
        let (index, rule) = self
            .rules
            .iter()
            .enumerate()
            .find(|(_, r)| base.contains(&r.when_contains))?;
        let mut counters = self.counters.lock().unwrap();
        let n = counters.entry((index, sha256_hex(&[base]))).or_insert(0);
        let response = rule.responses.get(*n).cloned();
        *n += 1;
        response
    }
}

fn mangle(text: &str, how: &Mangle) -> String {
    match how {
        Mangle::DropLastLine => {
            let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            lines[..lines.len().saturating_sub(1)].join("\n")
        }
        Mangle::SwapRoleAt(i) => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(k, line)| {
                if k != *i {
                    return line.to_string();
                }
                if line.starts_with(Role::Counselor.as_str()) {
                    line.replacen(Role::Counselor.as_str(), Role::Client.as_str(), 1)
                } else {
                    line.replacen(Role::Client.as_str(), Role::Counselor.as_str(), 1)
                }
            })
            .collect::<Vec<_>>()
            .join("\n"),
        Mangle::DropLastRecord => match serde_json::from_str::<Vec<Value>>(text) {
            Ok(mut v) => {
                v.pop();
                Value::Array(v).to_string()
            }
            Err(_) => text.to_string(),
        },
        Mangle::EmptyFinalAt(i) => match serde_json::from_str::<Vec<Value>>(text) {
            Ok(mut v) => {
                if let Some(obj) = v.get_mut(*i).and_then(Value::as_object_mut) {
                    obj.insert("final".into(), json!(""));
                }
                Value::Array(v).to_string()
            }
            Err(_) => text.to_string(),
        },
    }
}

impl ChatBackend for ScriptedBackend {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn max_input_tokens(&self) -> Option<u64> {
        self.inner.max_input_tokens()
    }

    fn call(&self, request: &ChatRequest) -> Completion {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match self.scripted(request.user_content()) {
            None | Some(ScriptedResponse::Pass) => self.inner.call(request),
            Some(ScriptedResponse::Fail(kind)) => {
                Completion::single(ChatOutcome::failure(kind, "scripted failure"))
            }
            Some(ScriptedResponse::Raw(text)) => {
                Completion::single(ChatOutcome::success(text, Some("stop".into())))
            }
            Some(ScriptedResponse::Mangled(how)) => {
                let mut completion = self.inner.call(request);
                if let ChatOutcome::Success { text, .. } = &mut completion.outcome {
                    *text = mangle(text, &how);
                }
                completion
            }
        }
    }
}
