//! Durable per-dialogue, per-stage records.
//!
//! Every record is written to a temporary file, fsynced, then renamed into
//! place, so a record is either fully present or absent.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::outcome::{CallTally, DialogueFailure};
use crate::refine::RefinedDialogue;
use crate::text::sha256_hex;

const MANIFEST: &str = "manifest.json";
const STAGE1_DIR: &str = "hypotheses";
const STAGE2_DIR: &str = "refined";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub fingerprint: String,
    pub target_language: String,
    pub hypothesis_backends: Vec<String>,
    pub refiner_backend: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisTexts {
    pub backend_id: String,
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StageOneResult {
    Aligned { hypotheses: Vec<HypothesisTexts> },
    Failed { failure: DialogueFailure },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageOneRecord {
    pub dialogue_id: String,
    pub result: StageOneResult,
    pub tallies: Vec<CallTally>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StageTwoResult {
    Refined { refined: RefinedDialogue },
    Failed { failure: DialogueFailure },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTwoRecord {
    pub dialogue_id: String,
    pub result: StageTwoResult,
    /// Absent when the candidate was selected without a refiner call.
    pub tally: Option<CallTally>,
}

#[derive(Debug, Clone)]
pub struct CheckpointStore {
    root: PathBuf,
}

impl CheckpointStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CheckpointStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn create_layout(&self) -> std::io::Result<()> {
        fs::create_dir_all(self.root.join(STAGE1_DIR))?;
        fs::create_dir_all(self.root.join(STAGE2_DIR))
    }

    pub fn has_manifest(&self) -> bool {
        self.root.join(MANIFEST).exists()
    }

    pub fn read_manifest(&self) -> std::io::Result<Option<Manifest>> {
        read_json(&self.root.join(MANIFEST))
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> std::io::Result<()> {
        write_atomic(&self.root.join(MANIFEST), manifest)
    }

    fn record_path(&self, stage_dir: &str, dialogue_id: &str) -> PathBuf {
        let key = &sha256_hex(&[dialogue_id])[..40];
        self.root.join(stage_dir).join(format!("{key}.json"))
    }

    pub fn read_stage_one(&self, dialogue_id: &str) -> std::io::Result<Option<StageOneRecord>> {
        let record: Option<StageOneRecord> = read_json(&self.record_path(STAGE1_DIR, dialogue_id))?;
        Ok(record.filter(|r| r.dialogue_id == dialogue_id))
    }

    pub fn write_stage_one(&self, record: &StageOneRecord) -> std::io::Result<()> {
        write_atomic(&self.record_path(STAGE1_DIR, &record.dialogue_id), record)
    }

    pub fn read_stage_two(&self, dialogue_id: &str) -> std::io::Result<Option<StageTwoRecord>> {
        let record: Option<StageTwoRecord> = read_json(&self.record_path(STAGE2_DIR, dialogue_id))?;
        Ok(record.filter(|r| r.dialogue_id == dialogue_id))
    }

    pub fn write_stage_two(&self, record: &StageTwoRecord) -> std::io::Result<()> {
        write_atomic(&self.record_path(STAGE2_DIR, &record.dialogue_id), record)
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> std::io::Result<Option<T>> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}: {e}", path.display()),
            )
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

/// Writes `value` as JSON to `path` via write-temp-then-rename.
pub fn write_atomic<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?;
    write_bytes_atomic(path, &bytes)
}

pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let file_name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("record");
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut file = File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::outcome::ExclusionCause;

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::new(dir.path().join("ck"));
        store.create_layout().unwrap();
        assert!(store.read_stage_one("a/b").unwrap().is_none());
        let record = StageOneRecord {
            dialogue_id: "a/b".into(),
            result: StageOneResult::Failed {
                failure: DialogueFailure::single("gpt", ExclusionCause::SafetyRefusal),
            },
            tallies: vec![CallTally::new("gpt")],
        };
        store.write_stage_one(&record).unwrap();
        assert_eq!(store.read_stage_one("a/b").unwrap(), Some(record));
        // no stray temp files
        let names: Vec<_> = fs::read_dir(dir.path().join("ck/hypotheses"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names.len(), 1);
        assert!(!names[0].starts_with('.'));
    }

    #[test]
    fn corrupt_record_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::new(dir.path());
        store.create_layout().unwrap();
        let path = store.record_path(STAGE2_DIR, "x");
        fs::write(path, b"{truncated").unwrap();
        assert!(store.read_stage_two("x").is_err());
    }
}
