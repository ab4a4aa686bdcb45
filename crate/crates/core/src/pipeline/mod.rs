//! Corpus-level orchestration of both stages.
//!
//! Dialogues are processed by a bounded pool of workers. After each stage the
//! per-dialogue result is checkpointed; the final corpus, provenance and
//! report are always assembled from the checkpoint records in input order, so
//! an interrupted-then-resumed run produces the same bytes as a one-shot run.

mod checkpoint;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

pub use checkpoint::{
    write_atomic, write_bytes_atomic, CheckpointStore, HypothesisTexts, Manifest, StageOneRecord,
    StageOneResult, StageTwoRecord, StageTwoResult,
};
pub use report::{BackendTotals, BuildReport, ConservationError, ExclusionEntry, Stage, Timings};

use crate::backends::{build_backend, BackendConfig, BackendError, ChatBackend};
use crate::corpus::{write_corpus, Corpus, CorpusError, Dialogue};
use crate::hypothesis::{AlignedTranslation, HypothesisError, HypothesisStage};
use crate::outcome::DialogueFailure;
use crate::prompts::{PromptVersion, RefinePromptOptions};
use crate::refine::{select_hypothesis, FusionMode, RefineError, RefineStage, RefinedDialogue};
use crate::text::sha256_hex;

fn default_concurrency() -> usize {
    4
}

fn default_retry_budget() -> u32 {
    2
}

fn default_true() -> bool {
    true
}

/// Everything that defines a translation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub target_language: String,
    pub hypothesis_backends: Vec<BackendConfig>,
    pub refiner: BackendConfig,
    #[serde(default = "default_concurrency")]
    pub concurrency_limit: usize,
    #[serde(default = "default_retry_budget")]
    pub hypothesis_retry_budget: u32,
    #[serde(default = "default_retry_budget")]
    pub refine_retry_budget: u32,
    pub checkpoint_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub prompt_version: PromptVersion,
    #[serde(default)]
    pub fusion: FusionMode,
    /// Ask the refiner for per-utterance analyses (kept in the provenance file).
    #[serde(default = "default_true")]
    pub analysis: bool,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Hypothesis(#[from] HypothesisError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint directory {0} already holds a run; resume it or choose another directory")]
    CheckpointExists(PathBuf),
    #[error("checkpoint directory {0} holds no run to resume")]
    NothingToResume(PathBuf),
    #[error("config fingerprint {found} does not match checkpoint fingerprint {expected}")]
    ConfigFingerprintMismatch { expected: String, found: String },
    #[error("checkpoint record for dialogue {0:?} does not match the source corpus")]
    CorruptCheckpoint(String),
    #[error("run interrupted after {completed} of {total} dialogues; resume to continue")]
    Interrupted { completed: usize, total: usize },
    #[error(transparent)]
    Conservation(#[from] ConservationError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Cooperative cancellation. Workers finish the stage they are in, checkpoint
/// it, and stop before starting more work.
#[derive(Debug, Clone, Default)]
pub struct CancelToken {
    flag: Arc<AtomicBool>,
    stop_after: Option<usize>,
}

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    /// Cancels automatically once `completed` stage records have been written.
    pub fn after_records(completed: usize) -> Self {
        CancelToken {
            flag: Arc::new(AtomicBool::new(false)),
            stop_after: Some(completed),
        }
    }

    pub fn cancel(&self) {
        self.flag.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.flag.load(Ordering::SeqCst)
    }

    fn record_written(&self, total_written: usize) {
        if matches!(self.stop_after, Some(n) if total_written >= n) {
            self.cancel();
        }
    }
}

/// One utterance of the provenance file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProvenanceUtterance {
    pub role: String,
    pub source: String,
    pub hypotheses: Vec<CandidateText>,
    pub analysis: String,
    #[serde(rename = "final")]
    pub final_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CandidateText {
    pub backend_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProvenanceRecord {
    pub dialogue_id: String,
    pub target_language: String,
    pub provenance: crate::refine::Provenance,
    pub utterances: Vec<ProvenanceUtterance>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub corpus: Corpus,
    pub provenance: Vec<ProvenanceRecord>,
    /// Stage 1 translations per backend, for dialogues whose stage 1 succeeded.
    pub hypothesis_corpora: Vec<(String, Corpus)>,
    pub report: BuildReport,
    pub timings: Timings,
}

impl RunOutput {
    /// Writes `translated.jsonl`, `provenance.jsonl`, `report.json`,
    /// `timings.json` and `hypotheses/<backend>.jsonl` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), PipelineError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| PipelineError::Checkpoint { path, source }
        };
        fs::create_dir_all(dir.join("hypotheses")).map_err(io(dir))?;
        let translated = dir.join("translated.jsonl");
        let mut bytes = Vec::new();
        write_corpus(&self.corpus, &mut bytes)?;
        write_bytes_atomic(&translated, &bytes).map_err(io(&translated))?;

        let provenance = dir.join("provenance.jsonl");
        let mut bytes = Vec::new();
        for record in &self.provenance {
            bytes.extend(serde_json::to_vec(record).expect("provenance serializes"));
            bytes.push(b'\n');
        }
        write_bytes_atomic(&provenance, &bytes).map_err(io(&provenance))?;

        for (backend_id, corpus) in &self.hypothesis_corpora {
            let path = dir
                .join("hypotheses")
                .join(format!("{}.jsonl", sanitize_file_name(backend_id)));
            let mut bytes = Vec::new();
            for d in corpus.dialogues() {
                let mut value = serde_json::to_value(d).expect("dialogue serializes");
                value
                    .as_object_mut()
                    .expect("dialogue is an object")
                    .insert("backend_id".into(), backend_id.clone().into());
                bytes.extend(serde_json::to_vec(&value).expect("record serializes"));
                bytes.push(b'\n');
            }
            write_bytes_atomic(&path, &bytes).map_err(io(&path))?;
        }

        let report = dir.join("report.json");
        write_bytes_atomic(&report, self.report.to_json().as_bytes()).map_err(io(&report))?;
        let timings = dir.join("timings.json");
        write_atomic(&timings, &self.timings).map_err(io(&timings))?;
        Ok(())
    }
}

fn sanitize_file_name(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Both stages plus their checkpoint store.
pub struct Pipeline {
    config: RunConfig,
    hypothesis: HypothesisStage,
    refine: RefineStage,
    store: CheckpointStore,
    fingerprint: String,
}

impl Pipeline {
    /// Builds backends from the config.
    pub fn from_config(config: RunConfig) -> Result<Self, PipelineError> {
        let hyps = config
            .hypothesis_backends
            .iter()
            .map(build_backend)
            .collect::<Result<Vec<_>, _>>()?;
        let refiner = build_backend(&config.refiner)?;
        Pipeline::with_backends(config, hyps, refiner)
    }

    /// Uses the given backend instances; their ids must match the config.
    pub fn with_backends(
        config: RunConfig,
        hypothesis_backends: Vec<Arc<dyn ChatBackend>>,
        refiner: Arc<dyn ChatBackend>,
    ) -> Result<Self, PipelineError> {
        validate_config(&config)?;
        let configured: Vec<&str> = config
            .hypothesis_backends
            .iter()
            .map(|b| b.backend_id.as_str())
            .collect();
        let given: Vec<&str> = hypothesis_backends.iter().map(|b| b.backend_id()).collect();
        if configured != given || refiner.backend_id() != config.refiner.backend_id {
            return Err(PipelineError::InvalidConfig(
                "backend instances do not match the configured backend ids".into(),
            ));
        }
        let hypothesis = HypothesisStage::new(
            hypothesis_backends,
            &config.target_language,
            config.hypothesis_retry_budget,
        )?;
        let options = RefinePromptOptions {
            version: config.prompt_version,
            hypothesis_count: config.hypothesis_backends.len(),
            with_analysis: config.analysis,
        };
        let refine = RefineStage::new(
            refiner,
            &config.target_language,
            config.refine_retry_budget,
            options,
        )?;
        let fingerprint = fingerprint(&config, hypothesis.system_prompt(), refine.system_prompt());
        Ok(Pipeline {
            store: CheckpointStore::new(&config.checkpoint_dir),
            config,
            hypothesis,
            refine,
            fingerprint,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Starts a fresh run. Fails if the checkpoint directory already holds one.
    pub fn run(&self, corpus: &Corpus, cancel: &CancelToken) -> Result<RunOutput, PipelineError> {
        if self.store.has_manifest() {
            return Err(PipelineError::CheckpointExists(
                self.store.root().to_path_buf(),
            ));
        }
        self.store
            .create_layout()
            .map_err(|e| self.checkpoint_error(e))?;
        let manifest = Manifest {
            fingerprint: self.fingerprint.clone(),
            target_language: self.config.target_language.clone(),
            hypothesis_backends: self.hypothesis.backend_ids(),
            refiner_backend: self.refine.refiner_id().to_string(),
            seed: self.config.seed,
        };
        self.store
            .write_manifest(&manifest)
            .map_err(|e| self.checkpoint_error(e))?;
        self.process(corpus, cancel)
    }

    /// Continues a run from its checkpoint directory.
    pub fn resume(
        &self,
        corpus: &Corpus,
        cancel: &CancelToken,
    ) -> Result<RunOutput, PipelineError> {
        let manifest = self
            .store
            .read_manifest()
            .map_err(|e| self.checkpoint_error(e))?
            .ok_or_else(|| PipelineError::NothingToResume(self.store.root().to_path_buf()))?;
        if manifest.fingerprint != self.fingerprint {
            return Err(PipelineError::ConfigFingerprintMismatch {
                expected: manifest.fingerprint,
                found: self.fingerprint.clone(),
            });
        }
        self.store
            .create_layout()
            .map_err(|e| self.checkpoint_error(e))?;
        self.process(corpus, cancel)
    }

    fn checkpoint_error(&self, source: std::io::Error) -> PipelineError {
        PipelineError::Checkpoint {
            path: self.store.root().to_path_buf(),
            source,
        }
    }

    fn process(&self, corpus: &Corpus, cancel: &CancelToken) -> Result<RunOutput, PipelineError> {
        let started = Instant::now();
        let dialogues = corpus.dialogues();
        let next = AtomicUsize::new(0);
        let written = AtomicUsize::new(0);
        let fatal: Mutex<Option<PipelineError>> = Mutex::new(None);
        let timings = Mutex::new(Timings::default());
        let writer = Mutex::new(());
        let workers = self.config.concurrency_limit.min(dialogues.len()).max(1);

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if cancel.is_cancelled() {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(d) = dialogues.get(i) else { break };
                    let ctx = WorkerCtx {
                        cancel,
                        written: &written,
                        timings: &timings,
                        writer: &writer,
                    };
                    if let Err(e) = self.process_dialogue(d, &ctx) {
                        fatal.lock().unwrap().get_or_insert(e);
                        cancel.cancel();
                        break;
                    }
                });
            }
        });

        if let Some(e) = fatal.into_inner().unwrap() {
            return Err(e);
        }
        let mut timings = timings.into_inner().unwrap();
        timings.total_ms = started.elapsed().as_millis();
        self.assemble(corpus, timings)
    }

    fn process_dialogue(&self, d: &Dialogue, ctx: &WorkerCtx<'_>) -> Result<(), PipelineError> {
        let io = |e| self.checkpoint_error(e);
        if self.store.read_stage_two(d.id()).map_err(io)?.is_some() {
            return Ok(());
        }
        let stage_one = match self.store.read_stage_one(d.id()).map_err(io)? {
            Some(record) => record,
            None => {
                let outcome = self.hypothesis.generate(d);
                let mut timings = ctx.timings.lock().unwrap();
                for t in &outcome.tallies {
                    timings.add(&t.backend_id, t.elapsed);
                }
                drop(timings);
                let result = match outcome.result {
                    Ok(hyps) => StageOneResult::Aligned {
                        hypotheses: hyps
                            .into_iter()
                            .map(|h| HypothesisTexts {
                                backend_id: h.backend_id().to_string(),
                                texts: h.texts().to_vec(),
                            })
                            .collect(),
                    },
                    Err(failure) => StageOneResult::Failed { failure },
                };
                let record = StageOneRecord {
                    dialogue_id: d.id().to_string(),
                    result,
                    tallies: outcome.tallies,
                };
                ctx.write(|| self.store.write_stage_one(&record))
                    .map_err(io)?;
                record
            }
        };
        let hypotheses = match &stage_one.result {
            StageOneResult::Failed { .. } => return Ok(()),
            StageOneResult::Aligned { hypotheses } => self.restore_hypotheses(d, hypotheses)?,
        };
        if ctx.cancel.is_cancelled() {
            return Ok(());
        }
        let record = match &self.config.fusion {
            FusionMode::Select { hypothesis } => {
                let refined = select_hypothesis(
                    d,
                    &hypotheses,
                    *hypothesis,
                    &self.config.target_language,
                    self.config.prompt_version,
                )?;
                StageTwoRecord {
                    dialogue_id: d.id().to_string(),
                    result: StageTwoResult::Refined { refined },
                    tally: None,
                }
            }
            FusionMode::Refine => {
                let outcome = self.refine.refine(d, &hypotheses)?;
                ctx.timings
                    .lock()
                    .unwrap()
                    .add(&outcome.tally.backend_id, outcome.tally.elapsed);
                StageTwoRecord {
                    dialogue_id: d.id().to_string(),
                    result: match outcome.result {
                        Ok(refined) => StageTwoResult::Refined { refined },
                        Err(failure) => StageTwoResult::Failed { failure },
                    },
                    tally: Some(outcome.tally),
                }
            }
        };
        ctx.write(|| self.store.write_stage_two(&record))
            .map_err(io)?;
        Ok(())
    }

    fn restore_hypotheses(
        &self,
        d: &Dialogue,
        hypotheses: &[HypothesisTexts],
    ) -> Result<Vec<AlignedTranslation>, PipelineError> {
        let expected = self.hypothesis.backend_ids();
        let ids: Vec<&str> = hypotheses.iter().map(|h| h.backend_id.as_str()).collect();
        if ids != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(PipelineError::CorruptCheckpoint(d.id().to_string()));
        }
        hypotheses
            .iter()
            .map(|h| {
                AlignedTranslation::new(
                    d,
                    h.backend_id.clone(),
                    self.config.target_language.clone(),
                    h.texts.clone(),
                )
                .map_err(|_| PipelineError::CorruptCheckpoint(d.id().to_string()))
            })
            .collect()
    }

    fn assemble(&self, corpus: &Corpus, timings: Timings) -> Result<RunOutput, PipelineError> {
        let io = |e| self.checkpoint_error(e);
        let backend_ids = self.hypothesis.backend_ids();
        let mut emitted = Vec::new();
        let mut provenance = Vec::new();
        let mut hypothesis_dialogues: Vec<Vec<Dialogue>> = vec![Vec::new(); backend_ids.len()];
        let mut excluded = Vec::new();
        let mut totals: BTreeMap<String, BackendTotals> = BTreeMap::new();
        let mut completed = 0;

        for d in corpus.dialogues() {
            let Some(one) = self.store.read_stage_one(d.id()).map_err(io)? else {
                continue;
            };
            for t in &one.tallies {
                totals.entry(t.backend_id.clone()).or_default().add(t);
            }
            let hyps = match &one.result {
                StageOneResult::Failed { failure } => {
                    completed += 1;
                    excluded.push(exclusion(d, Stage::Hypothesis, failure));
                    continue;
                }
                StageOneResult::Aligned { hypotheses } => self.restore_hypotheses(d, hypotheses)?,
            };
            for (k, h) in hyps.iter().enumerate() {
                hypothesis_dialogues[k].push(h.to_dialogue(d));
            }
            let Some(two) = self.store.read_stage_two(d.id()).map_err(io)? else {
                continue;
            };
            completed += 1;
            if let Some(t) = &two.tally {
                totals.entry(t.backend_id.clone()).or_default().add(t);
            }
            match &two.result {
                StageTwoResult::Failed { failure } => {
                    excluded.push(exclusion(d, Stage::Refine, failure));
                }
                StageTwoResult::Refined { refined } => {
                    let refined = RefinedDialogue::new(
                        d,
                        refined.target_language(),
                        refined.utterances().to_vec(),
                        refined.provenance().clone(),
                    )
                    .map_err(|_| PipelineError::CorruptCheckpoint(d.id().to_string()))?;
                    provenance.push(provenance_record(d, &hyps, &refined));
                    emitted.push(refined.to_dialogue(d));
                }
            }
        }

        let total = corpus.len();
        if completed < total {
            warn!(
                completed,
                total, "run stopped before every dialogue finished"
            );
            return Err(PipelineError::Interrupted { completed, total });
        }
        let report = BuildReport::new(
            total,
            emitted.len(),
            excluded,
            totals,
            self.fingerprint.clone(),
        )?;
        info!(
            emitted = report.emitted_count(),
            excluded = report.excluded().len(),
            "run complete"
        );
        let hypothesis_corpora = backend_ids
            .into_iter()
            .zip(hypothesis_dialogues)
            .map(|(id, ds)| Ok((id, Corpus::new(&self.config.target_language, ds)?)))
            .collect::<Result<Vec<_>, CorpusError>>()?;
        Ok(RunOutput {
            corpus: Corpus::new(&self.config.target_language, emitted)?,
            provenance,
            hypothesis_corpora,
            report,
            timings,
        })
    }
}

struct WorkerCtx<'a> {
    cancel: &'a CancelToken,
    written: &'a AtomicUsize,
    timings: &'a Mutex<Timings>,
    writer: &'a Mutex<()>,
}

impl WorkerCtx<'_> {
    /// Serializes checkpoint writes and counts them for injected interrupts.
    fn write(&self, f: impl FnOnce() -> std::io::Result<()>) -> std::io::Result<()> {
        let _guard = self.writer.lock().unwrap();
        f()?;
        let n = self.written.fetch_add(1, Ordering::SeqCst) + 1;
        self.cancel.record_written(n);
        Ok(())
    }
}

fn exclusion(d: &Dialogue, stage: Stage, failure: &DialogueFailure) -> ExclusionEntry {
    ExclusionEntry {
        dialogue_id: d.id().to_string(),
        stage,
        cause: failure.primary_cause(),
        causes: failure.causes.clone(),
    }
}

fn provenance_record(
    d: &Dialogue,
    hyps: &[AlignedTranslation],
    refined: &RefinedDialogue,
) -> ProvenanceRecord {
    let utterances = d
        .utterances()
        .iter()
        .zip(refined.utterances())
        .enumerate()
        .map(|(i, (u, r))| ProvenanceUtterance {
            role: u.role().as_str().to_string(),
            source: u.text().to_string(),
            hypotheses: hyps
                .iter()
                .map(|h| CandidateText {
                    backend_id: h.backend_id().to_string(),
                    text: h.texts()[i].clone(),
                })
                .collect(),
            analysis: r.analysis.clone(),
            final_text: r.final_text.clone(),
        })
        .collect();
    ProvenanceRecord {
        dialogue_id: d.id().to_string(),
        target_language: refined.target_language().to_string(),
        provenance: refined.provenance().clone(),
        utterances,
    }
}

fn validate_config(config: &RunConfig) -> Result<(), PipelineError> {
    let invalid = |m: String| Err(PipelineError::InvalidConfig(m));
    if config.target_language.trim().is_empty() {
        return invalid("target_language is empty".into());
    }
    if config.concurrency_limit == 0 {
        return invalid("concurrency_limit must be at least 1".into());
    }
    if config.hypothesis_backends.len() < 2 {
        return invalid("at least two hypothesis backends are required".into());
    }
    let mut ids: Vec<&str> = config
        .hypothesis_backends
        .iter()
        .map(|b| b.backend_id.as_str())
        .collect();
    ids.push(&config.refiner.backend_id);
    let mut sorted = ids.clone();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return invalid(format!("backend id {:?} is used twice", w[0]));
    }
    if let FusionMode::Select { hypothesis } = config.fusion {
        if hypothesis == 0 || hypothesis > config.hypothesis_backends.len() {
            return invalid(format!("select hypothesis {hypothesis} is out of range"));
        }
    }
    for b in config.hypothesis_backends.iter().chain([&config.refiner]) {
        b.validate()?;
    }
    Ok(())
}

/// Hash of both system prompts, the backend ids, the target language and the
/// fusion mode.
pub fn fingerprint(config: &RunConfig, hypothesis_prompt: &str, refine_prompt: &str) -> String {
    let fusion = serde_json::to_string(&config.fusion).expect("fusion mode serializes");
    let mut parts: Vec<&str> = vec![
        "fingerprint-v1",
        hypothesis_prompt,
        refine_prompt,
        &config.target_language,
        &fusion,
        &config.refiner.backend_id,
    ];
    parts.extend(
        config
            .hypothesis_backends
            .iter()
            .map(|b| b.backend_id.as_str()),
    );
    sha256_hex(&parts)
}
