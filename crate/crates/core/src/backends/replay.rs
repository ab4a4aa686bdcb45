//! Record/replay of provider responses, one content-addressed file per request.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{ChatBackend, ChatOutcome, ChatRequest, Completion, FailureKind, FixtureMode};
use crate::text::sha256_hex;

#[derive(Debug, Serialize, Deserialize)]
struct Fixture {
    backend_id: String,
    request: ChatRequest,
    outcome: ChatOutcome,
}

/// File name (without directory) of the fixture for `request` on `backend_id`.
pub fn fixture_key(backend_id: &str, request: &ChatRequest) -> String {
    format!(
        "{}.json",
        sha256_hex(&[backend_id, request.system_prompt(), request.user_content()])
    )
}

/// In `Record` mode forwards to the wrapped backend and stores each outcome;
/// in `Replay` mode answers only from stored fixtures.
pub struct RecordReplayBackend {
    inner: Arc<dyn ChatBackend>,
    mode: FixtureMode,
    dir: PathBuf,
}

impl RecordReplayBackend {
    pub fn new(inner: Arc<dyn ChatBackend>, mode: FixtureMode, dir: impl Into<PathBuf>) -> Self {
        RecordReplayBackend {
            inner,
            mode,
            dir: dir.into(),
        }
    }

    fn path_for(&self, request: &ChatRequest) -> PathBuf {
        self.dir.join(fixture_key(self.inner.backend_id(), request))
    }

    fn store(
        &self,
        path: &Path,
        request: &ChatRequest,
        outcome: &ChatOutcome,
    ) -> std::io::Result<()> {
        fs::create_dir_all(&self.dir)?;
        let fixture = Fixture {
            backend_id: self.inner.backend_id().to_string(),
            request: request.clone(),
            outcome: outcome.clone(),
        };
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&fixture)?)?;
        fs::rename(tmp, path)
    }
}

impl ChatBackend for RecordReplayBackend {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn max_input_tokens(&self) -> Option<u64> {
        self.inner.max_input_tokens()
    }

    fn call(&self, request: &ChatRequest) -> Completion {
        let path = self.path_for(request);
        match self.mode {
            FixtureMode::Record => {
                let completion = self.inner.call(request);
                // transient failures are not worth pinning
                if completion.outcome.failure_kind() != Some(FailureKind::Transient) {
                    if let Err(e) = self.store(&path, request, &completion.outcome) {
                        warn!(path = %path.display(), error = %e, "could not record fixture");
                    }
                }
                completion
            }
            FixtureMode::Replay => {
                let loaded = fs::read(&path)
                    .map_err(|e| e.to_string())
                    .and_then(|bytes| {
                        serde_json::from_slice::<Fixture>(&bytes).map_err(|e| e.to_string())
                    });
                match loaded {
                    Ok(fixture) => Completion::single(fixture.outcome),
                    Err(e) => Completion::single(ChatOutcome::failure(
                        FailureKind::Malformed,
                        format!("no replay fixture {}: {e}", path.display()),
                    )),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::MockTranslator;

    #[test]
    fn record_then_replay_offline() {
        let dir = tempfile::tempdir().unwrap();
        let inner = Arc::new(MockTranslator::new("gpt"));
        let recorder = RecordReplayBackend::new(inner.clone(), FixtureMode::Record, dir.path());
        let request = ChatRequest::new("sys", "Counselor: hello").unwrap();
        let live = recorder.complete(&request);
        assert_eq!(inner.calls(), 1);
        assert!(dir.path().join(fixture_key("gpt", &request)).exists());

        let replayer = RecordReplayBackend::new(inner.clone(), FixtureMode::Replay, dir.path());
        assert_eq!(replayer.complete(&request), live);
        assert_eq!(inner.calls(), 1);

        let missing = ChatRequest::new("sys", "Client: other").unwrap();
        assert_eq!(
            replayer.complete(&missing).failure_kind(),
            Some(FailureKind::Malformed)
        );
    }
}
