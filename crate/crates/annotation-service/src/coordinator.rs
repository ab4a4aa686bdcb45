//! Assignment state: leases, completed judgments and the durable log.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use fusion_core::humeval::{
    aggregate_judgments, AggregationMode, Choice, EvalPair, HiddenAssignment, HistoryTurn,
    HumanEvalReport, Judgment,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown annotator {0:?}")]
    UnknownAnnotator(String),
    #[error("lease on pair {pair_id} for {annotator_id} expired or was never granted")]
    LeaseExpired {
        pair_id: String,
        annotator_id: String,
    },
    #[error("annotator {annotator_id} already judged pair {pair_id}")]
    DuplicateJudgment {
        pair_id: String,
        annotator_id: String,
    },
    #[error("unknown pair {0:?}")]
    UnknownPair(String),
    #[error("results need the sealed assignment file (trusted mode)")]
    ResultsUnavailableInBlindMode,
    #[error("this study does not accept undecided verdicts")]
    UndecidedNotAllowed,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("judgment log {path}: {message}")]
    CorruptLog { path: PathBuf, message: String },
    #[error("assignment file does not match the task set: {0}")]
    AssignmentMismatch(String),
    #[error(transparent)]
    Aggregation(#[from] fusion_core::humeval::HumEvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Test clock that only moves when told to.
#[derive(Debug, Clone)]
pub struct ManualClock(Arc<Mutex<DateTime<Utc>>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        ManualClock(Arc::new(Mutex::new(start)))
    }

    pub fn advance(&self, by: Duration) {
        let mut now = self.0.lock().unwrap();
        *now += chrono::Duration::from_std(by).expect("duration in range");
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub lease_ttl: Duration,
    pub required_replicas: usize,
    /// When set, only these annotator ids are served.
    pub annotators: Option<HashSet<String>>,
    pub allow_undecided: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            lease_ttl: Duration::from_secs(600),
            required_replicas: 1,
            annotators: None,
            allow_undecided: false,
        }
    }
}

/// What an annotator is shown. Built only from blinded pair fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    pub pair_id: String,
    pub history: Vec<HistoryTurn>,
    pub left_text: String,
    pub right_text: String,
}

impl From<&EvalPair> for TaskView {
    fn from(p: &EvalPair) -> Self {
        TaskView {
            pair_id: p.pair_id().to_string(),
            history: p.history().to_vec(),
            left_text: p.left_text().to_string(),
            right_text: p.right_text().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextTask {
    Task {
        #[serde(flatten)]
        task: TaskView,
        lease_expires: DateTime<Utc>,
    },
    NoTasksRemaining {
        judged: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub pair_id: String,
    pub judged: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total_pairs: usize,
    pub fully_judged: usize,
    pub in_flight: usize,
    pub per_annotator: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
struct Lease {
    pair_id: String,
    expires: DateTime<Utc>,
}

/// Append-only judgment log, one JSON record per line, fsynced per append.
#[derive(Debug)]
struct JudgmentLog {
    path: PathBuf,
    file: File,
}

impl JudgmentLog {
    /// Opens (creating if needed) and returns the records already present.
    /// A torn final line, left by a crash mid-append, is cut off: it was
    /// never acknowledged.
    fn open(path: &Path) -> Result<(Self, Vec<Judgment>), ServiceError> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        let mut content = String::new();
        file.read_to_string(&mut content)?;
        let complete = content.rfind('\n').map_or(0, |i| i + 1);
        if complete < content.len() {
            warn!(path = %path.display(), "dropping incomplete trailing log record");
            file.set_len(complete as u64)?;
            file.sync_all()?;
        }
        let mut records = Vec::new();
        for (i, line) in content[..complete].lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(line).map_err(|e| ServiceError::CorruptLog {
                    path: path.to_path_buf(),
                    message: format!("line {}: {e}", i + 1),
                })?,
            );
        }
        file.seek(SeekFrom::End(0))?;
        Ok((
            JudgmentLog {
                path: path.to_path_buf(),
                file,
            },
            records,
        ))
    }

    fn append(&mut self, judgment: &Judgment) -> Result<(), ServiceError> {
        let mut line = serde_json::to_vec(judgment).map_err(std::io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }
}

/// Owns all mutable assignment state. Callers serialize access.
pub struct Coordinator {
    pairs: Vec<EvalPair>,
    index: HashMap<String, usize>,
    assignments: Option<Vec<HiddenAssignment>>,
    completed: HashMap<String, BTreeSet<String>>,
    judgments: Vec<Judgment>,
    leases: HashMap<String, Lease>,
    log: JudgmentLog,
    config: ServiceConfig,
    clock: Arc<dyn Clock>,
}

impl Coordinator {
    /// Loads the task set and replays the judgment log.
    pub fn open(
        pairs: Vec<EvalPair>,
        assignments: Option<Vec<HiddenAssignment>>,
        log_path: &Path,
        config: ServiceConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        let index: HashMap<String, usize> = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| (p.pair_id().to_string(), i))
            .collect();
        if index.len() != pairs.len() {
            return Err(ServiceError::BadRequest(
                "task set has duplicate pair ids".into(),
            ));
        }
        if let Some(a) = &assignments {
            let ids: HashSet<&str> = a.iter().map(|h| h.pair_id.as_str()).collect();
            if ids.len() != a.len()
                || ids.len() != pairs.len()
                || !pairs.iter().all(|p| ids.contains(p.pair_id()))
            {
                return Err(ServiceError::AssignmentMismatch(
                    "pair ids differ between tasks and assignments".into(),
                ));
            }
        }
        if let Some(parent) = log_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let (log, replayed) = JudgmentLog::open(log_path)?;
        let mut coordinator = Coordinator {
            pairs,
            index,
            assignments,
            completed: HashMap::new(),
            judgments: Vec::new(),
            leases: HashMap::new(),
            log,
            config,
            clock,
        };
        for j in replayed {
            if !coordinator.index.contains_key(&j.pair_id) {
                return Err(ServiceError::CorruptLog {
                    path: coordinator.log.path.clone(),
                    message: format!("judgment for unknown pair {}", j.pair_id),
                });
            }
            coordinator.record(j);
        }
        info!(
            pairs = coordinator.pairs.len(),
            judgments = coordinator.judgments.len(),
            "coordinator ready"
        );
        Ok(coordinator)
    }

    pub fn is_trusted(&self) -> bool {
        self.assignments.is_some()
    }

    fn record(&mut self, j: Judgment) {
        self.completed
            .entry(j.pair_id.clone())
            .or_default()
            .insert(j.annotator_id.clone());
        self.judgments.push(j);
    }

    fn check_annotator(&self, annotator_id: &str) -> Result<(), ServiceError> {
        if annotator_id.trim().is_empty() {
            return Err(ServiceError::BadRequest("annotator id is empty".into()));
        }
        match &self.config.annotators {
            Some(allowed) if !allowed.contains(annotator_id) => {
                Err(ServiceError::UnknownAnnotator(annotator_id.to_string()))
            }
            _ => Ok(()),
        }
    }

    fn expire_leases(&mut self, now: DateTime<Utc>) {
        self.leases.retain(|_, lease| lease.expires > now);
    }

    fn judged_by(&self, annotator_id: &str) -> usize {
        self.completed
            .values()
            .filter(|set| set.contains(annotator_id))
            .count()
    }

    /// Hands out (or re-hands) one pair to `annotator_id`.
    pub fn next_task(&mut self, annotator_id: &str) -> Result<NextTask, ServiceError> {
        self.check_annotator(annotator_id)?;
        let now = self.clock.now();
        self.expire_leases(now);
        let ttl = chrono::Duration::from_std(self.config.lease_ttl).expect("ttl in range");
        if let Some(lease) = self.leases.get_mut(annotator_id) {
            lease.expires = now + ttl;
            let pair = &self.pairs[self.index[&lease.pair_id]];
            return Ok(NextTask::Task {
                task: pair.into(),
                lease_expires: lease.expires,
            });
        }
        let mut in_flight: HashMap<&str, usize> = HashMap::new();
        for lease in self.leases.values() {
            *in_flight.entry(lease.pair_id.as_str()).or_default() += 1;
        }
        let empty = BTreeSet::new();
        let candidate = self
            .pairs
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let done = self.completed.get(p.pair_id()).unwrap_or(&empty);
                let leased = in_flight.get(p.pair_id()).copied().unwrap_or(0);
                let open = !done.contains(annotator_id)
                    && done.len() + leased < self.config.required_replicas;
                open.then_some(((done.len(), leased, i), i))
            })
            .min_by_key(|(rank, _)| *rank)
            .map(|(_, i)| i);
        let Some(i) = candidate else {
            return Ok(NextTask::NoTasksRemaining {
                judged: self.judged_by(annotator_id),
            });
        };
        let pair = &self.pairs[i];
        let expires = now + ttl;
        self.leases.insert(
            annotator_id.to_string(),
            Lease {
                pair_id: pair.pair_id().to_string(),
                expires,
            },
        );
        Ok(NextTask::Task {
            task: pair.into(),
            lease_expires: expires,
        })
    }

    /// Records a verdict. The log append is durable before this returns.
    pub fn submit(
        &mut self,
        annotator_id: &str,
        pair_id: &str,
        choice: Choice,
        elapsed_s: f64,
    ) -> Result<Ack, ServiceError> {
        self.check_annotator(annotator_id)?;
        if !self.index.contains_key(pair_id) {
            return Err(ServiceError::UnknownPair(pair_id.to_string()));
        }
        if self
            .completed
            .get(pair_id)
            .is_some_and(|s| s.contains(annotator_id))
        {
            return Err(ServiceError::DuplicateJudgment {
                pair_id: pair_id.to_string(),
                annotator_id: annotator_id.to_string(),
            });
        }
        if choice == Choice::Undecided && !self.config.allow_undecided {
            return Err(ServiceError::UndecidedNotAllowed);
        }
        if !elapsed_s.is_finite() || elapsed_s < 0.0 {
            return Err(ServiceError::BadRequest(
                "elapsed_s must be a non-negative number".into(),
            ));
        }
        let now = self.clock.now();
        self.expire_leases(now);
        let holds = self
            .leases
            .get(annotator_id)
            .is_some_and(|l| l.pair_id == pair_id);
        if !holds {
            return Err(ServiceError::LeaseExpired {
                pair_id: pair_id.to_string(),
                annotator_id: annotator_id.to_string(),
            });
        }
        let judgment = Judgment {
            pair_id: pair_id.to_string(),
            annotator_id: annotator_id.to_string(),
            choice,
            elapsed_s,
            timestamp: now,
        };
        self.log.append(&judgment)?;
        self.leases.remove(annotator_id);
        self.record(judgment);
        Ok(Ack {
            pair_id: pair_id.to_string(),
            judged: self.judged_by(annotator_id),
        })
    }

    pub fn progress(&mut self) -> Progress {
        self.expire_leases(self.clock.now());
        let mut per_annotator = BTreeMap::new();
        for j in &self.judgments {
            *per_annotator.entry(j.annotator_id.clone()).or_insert(0) += 1;
        }
        Progress {
            total_pairs: self.pairs.len(),
            fully_judged: self
                .completed
                .values()
                .filter(|s| s.len() >= self.config.required_replicas)
                .count(),
            in_flight: self.leases.len(),
            per_annotator,
        }
    }

    pub fn results(&self, mode: AggregationMode) -> Result<HumanEvalReport, ServiceError> {
        let assignments = self
            .assignments
            .as_ref()
            .ok_or(ServiceError::ResultsUnavailableInBlindMode)?;
        Ok(aggregate_judgments(assignments, &self.judgments, mode)?)
    }

    pub fn judgments(&self) -> &[Judgment] {
        &self.judgments
    }
}
