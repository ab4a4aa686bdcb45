//! Automatic evaluation: dialogue sampling, the distinct-output filter,
//! reference-free scoring and paired significance tests against the
//! proposed system.

mod report;
mod scorer;
mod stats;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use report::{build_comparison_report, ComparisonReport, MetricCell, SystemRow};
pub use scorer::{
    length_ratio, parse_scores, write_tsv, CommandScorer, ConstantScorer, LengthRatioScorer,
    MetricSpec, Orientation, Scorer, ScorerError,
};
pub use stats::{
    bonferroni, wilcoxon_signed_rank, StatsError, WilcoxonMethod, WilcoxonMode, WilcoxonResult,
    AUTO_EXACT_MAX_N,
};

use crate::corpus::Corpus;
use crate::text::normalize_text;

/// Systems compared per utterance: three single backends and the proposed one.
pub const SYSTEM_COUNT: usize = 4;
pub const DEFAULT_MIN_DISTINCT: usize = 3;
pub const DEFAULT_ALPHA: f64 = 0.01;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot sample {requested} dialogues from a corpus of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("expected {SYSTEM_COUNT} systems, got {0}")]
    WrongSystemCount(usize),
    #[error(
        "system {system} has {got} utterances for dialogue {dialogue_id}, source has {expected}"
    )]
    Misaligned {
        system: String,
        dialogue_id: String,
        expected: usize,
        got: usize,
    },
    #[error("dialogue {dialogue_id} is missing from {system}")]
    MissingDialogue { system: String, dialogue_id: String },
    #[error("records for metric {metric} are not paired across systems: {detail}")]
    UnpairedRecords { metric: String, detail: String },
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UtteranceKey {
    pub dialogue_id: String,
    pub index: usize,
}

/// All systems' translations of one source utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemOutputSet {
    key: UtteranceKey,
    source_text: String,
    outputs: BTreeMap<String, String>,
}

impl SystemOutputSet {
    pub fn new(
        key: UtteranceKey,
        source_text: impl Into<String>,
        outputs: BTreeMap<String, String>,
    ) -> Result<Self, EvalError> {
        if outputs.len() != SYSTEM_COUNT {
            return Err(EvalError::WrongSystemCount(outputs.len()));
        }
        Ok(SystemOutputSet {
            key,
            source_text: source_text.into(),
            outputs,
        })
    }

    pub fn key(&self) -> &UtteranceKey {
        &self.key
    }

    pub fn source_text(&self) -> &str {
        &self.source_text
    }

    pub fn outputs(&self) -> &BTreeMap<String, String> {
        &self.outputs
    }

    pub fn distinct_count(&self) -> usize {
        self.outputs
            .values()
            .map(|t| normalize_text(t))
            .collect::<BTreeSet<_>>()
            .len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub key: UtteranceKey,
    pub system_id: String,
    pub metric_id: String,
    pub score: f64,
}

/// Uniform sample of `n` dialogue ids without replacement, in sampled order.
pub fn sample_eval_dialogues(
    corpus: &Corpus,
    n: usize,
    seed: u64,
) -> Result<Vec<String>, EvalError> {
    let ids: Vec<&str> = corpus.ids().collect();
    sample_ids(&ids, n, seed)
}

pub fn sample_ids(ids: &[&str], n: usize, seed: u64) -> Result<Vec<String>, EvalError> {
    if n > ids.len() {
        return Err(EvalError::SampleTooLarge {
            requested: n,
            available: ids.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, ids.len(), n)
        .into_iter()
        .map(|i| ids[i].to_string())
        .collect())
}

/// Ids present in the source and in every system corpus, in source order.
pub fn common_dialogue_ids(source: &Corpus, systems: &[(String, &Corpus)]) -> Vec<String> {
    source
        .ids()
        .filter(|id| systems.iter().all(|(_, c)| c.get(id).is_some()))
        .map(str::to_string)
        .collect()
}

/// One output set per utterance of each listed dialogue.
pub fn build_output_sets(
    source: &Corpus,
    systems: &[(String, &Corpus)],
    dialogue_ids: &[String],
) -> Result<Vec<SystemOutputSet>, EvalError> {
    if systems.len() != SYSTEM_COUNT {
        return Err(EvalError::WrongSystemCount(systems.len()));
    }
    let mut sets = Vec::new();
    for id in dialogue_ids {
        let src = source.get(id).ok_or_else(|| EvalError::MissingDialogue {
            system: "source".into(),
            dialogue_id: id.clone(),
        })?;
        let mut translated = Vec::with_capacity(systems.len());
        for (system, corpus) in systems {
            let d = corpus.get(id).ok_or_else(|| EvalError::MissingDialogue {
                system: system.clone(),
                dialogue_id: id.clone(),
            })?;
            if d.len() != src.len() {
                return Err(EvalError::Misaligned {
                    system: system.clone(),
                    dialogue_id: id.clone(),
                    expected: src.len(),
                    got: d.len(),
                });
            }
            translated.push((system, d));
        }
        for (index, u) in src.utterances().iter().enumerate() {
            let outputs = translated
                .iter()
                .map(|(system, d)| ((*system).clone(), d.utterances()[index].text().to_string()))
                .collect();
            sets.push(SystemOutputSet::new(
                UtteranceKey {
                    dialogue_id: id.clone(),
                    index,
                },
                u.text(),
                outputs,
            )?);
        }
    }
    Ok(sets)
}

/// Keeps the sets whose outputs contain at least `min_distinct` different
/// normalized texts.
pub fn uniqueness_filter(sets: &[SystemOutputSet], min_distinct: usize) -> Vec<SystemOutputSet> {
    sets.iter()
        .filter(|s| s.distinct_count() >= min_distinct)
        .cloned()
        .collect()
}

/// Scores every (utterance, system) pair with one batched scorer call.
pub fn score_outputs(
    sets: &[SystemOutputSet],
    scorer: &dyn Scorer,
    metric: &MetricSpec,
) -> Result<Vec<ScoreRecord>, EvalError> {
    let mut rows = Vec::new();
    let mut keys = Vec::new();
    for set in sets {
        for (system, text) in &set.outputs {
            rows.push((set.source_text.clone(), text.clone()));
            keys.push((&set.key, system));
        }
    }
    let scores = scorer.score(&rows)?;
    if scores.len() != rows.len() {
        return Err(ScorerError::RowCountMismatch {
            expected: rows.len(),
            got: scores.len(),
        }
        .into());
    }
    keys.into_iter()
        .zip(scores)
        .enumerate()
        .map(|(row, ((key, system), score))| {
            Ok(ScoreRecord {
                key: key.clone(),
                system_id: system.clone(),
                metric_id: metric.metric_id.clone(),
                score: metric.check(row, score)?,
            })
        })
        .collect()
}
