//! Pairwise human evaluation: choosing utterances, building blinded pairs,
//! and turning judgments back into win/lose counts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;
use tracing::info;

use crate::autoeval::UtteranceKey;
use crate::corpus::{Corpus, Dialogue, Role};
use crate::text::normalize_text;

pub const DEFAULT_DIALOGUES: usize = 10;
pub const DEFAULT_PER_DIALOGUE: usize = 10;
pub const HISTORY_TURNS: usize = 4;

#[derive(Debug, Error)]
pub enum HumEvalError {
    #[error("only {found} of {needed} dialogues have enough eligible utterances")]
    InsufficientEligibleDialogues { needed: usize, found: usize },
    #[error("pair would compare identical texts at {dialogue_id}#{index}")]
    IdenticalTexts { dialogue_id: String, index: usize },
    #[error("dialogue {dialogue_id} is missing or misaligned in {system}")]
    Misaligned { system: String, dialogue_id: String },
    #[error("system ids must be distinct and there must be at least one baseline")]
    InvalidSystems,
    #[error("judgment references unknown pair {0}")]
    UnknownPair(String),
    #[error("annotator {annotator_id} already judged pair {pair_id}")]
    DuplicateJudgment {
        pair_id: String,
        annotator_id: String,
    },
    #[error("{path}: line {line}: {message}")]
    MalformedRecord {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn flip(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

/// An annotator's verdict. `Undecided` is only accepted when explicitly enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Left,
    Right,
    Undecided,
}

impl Choice {
    pub fn side(self) -> Option<Side> {
        match self {
            Choice::Left => Some(Side::Left),
            Choice::Right => Some(Side::Right),
            Choice::Undecided => None,
        }
    }
}

/// Systems under comparison: the proposed one and its baselines, each a
/// translated corpus aligned with the source.
#[derive(Debug, Clone, Copy)]
pub struct EvalSystems<'a> {
    pub proposed: (&'a str, &'a Corpus),
    pub baselines: &'a [(String, Corpus)],
}

impl<'a> EvalSystems<'a> {
    fn all(&self) -> Vec<(&'a str, &'a Corpus)> {
        std::iter::once(self.proposed)
            .chain(self.baselines.iter().map(|(id, c)| (id.as_str(), c)))
            .collect()
    }

    fn validate(&self) -> Result<(), HumEvalError> {
        let ids: HashSet<&str> = self.all().iter().map(|(id, _)| *id).collect();
        if self.baselines.is_empty() || ids.len() != self.baselines.len() + 1 {
            return Err(HumEvalError::InvalidSystems);
        }
        Ok(())
    }

    fn dialogue(
        &self,
        system: &str,
        corpus: &'a Corpus,
        id: &str,
    ) -> Result<&'a Dialogue, HumEvalError> {
        corpus.get(id).ok_or_else(|| HumEvalError::Misaligned {
            system: system.to_string(),
            dialogue_id: id.to_string(),
        })
    }

    /// Dialogues present in every system with identical length and roles, in
    /// the proposed corpus's order.
    fn common_dialogues(&self) -> Vec<&'a str> {
        let (_, proposed) = self.proposed;
        proposed
            .dialogues()
            .iter()
            .filter(|d| {
                self.baselines.iter().all(|(_, c)| {
                    c.get(d.id())
                        .is_some_and(|b| b.len() == d.len() && b.roles().eq(d.roles()))
                })
            })
            .map(|d| d.id())
            .collect()
    }

    /// Indices where the proposed text differs from every baseline after
    /// normalization.
    fn eligible_indices(&self, id: &str) -> Vec<usize> {
        let (_, proposed) = self.proposed;
        let Some(p) = proposed.get(id) else {
            return Vec::new();
        };
        let baselines: Vec<&Dialogue> = self
            .baselines
            .iter()
            .filter_map(|(_, c)| c.get(id))
            .collect();
        (0..p.len())
            .filter(|&i| {
                let pt = normalize_text(p.utterances()[i].text());
                baselines
                    .iter()
                    .all(|b| normalize_text(b.utterances()[i].text()) != pt)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub dialogue_id: String,
    pub eligible: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub keys: Vec<UtteranceKey>,
    pub rejected: Vec<Rejection>,
}

/// Draws dialogues in seeded random order, rejecting those with fewer than
/// `per_dialogue` eligible utterances, until `n_dialogues` are accepted; then
/// samples `per_dialogue` eligible utterances from each.
pub fn select_eval_utterances(
    systems: &EvalSystems<'_>,
    n_dialogues: usize,
    per_dialogue: usize,
    seed: u64,
) -> Result<Selection, HumEvalError> {
    systems.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates = systems.common_dialogues();
    candidates.shuffle(&mut rng);
    let mut keys = Vec::new();
    let mut rejected = Vec::new();
    let mut accepted = 0;
    for id in candidates {
        if accepted == n_dialogues {
            break;
        }
        let eligible = systems.eligible_indices(id);
        if eligible.len() < per_dialogue {
            info!(
                dialogue_id = id,
                eligible = eligible.len(),
                "dialogue rejected for human evaluation"
            );
            rejected.push(Rejection {
                dialogue_id: id.to_string(),
                eligible: eligible.len(),
            });
            continue;
        }
        let mut chosen: Vec<usize> =
            rand::seq::index::sample(&mut rng, eligible.len(), per_dialogue)
                .into_iter()
                .map(|i| eligible[i])
                .collect();
        chosen.sort_unstable();
        keys.extend(chosen.into_iter().map(|index| UtteranceKey {
            dialogue_id: id.to_string(),
            index,
        }));
        accepted += 1;
    }
    if accepted < n_dialogues {
        return Err(HumEvalError::InsufficientEligibleDialogues {
            needed: n_dialogues,
            found: accepted,
        });
    }
    Ok(Selection { keys, rejected })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryTurn {
    pub role: Role,
    pub text: String,
}

/// What annotators see. Carries no system names and no source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pair_id: String,
    dialogue_id: String,
    utterance_index: usize,
    history: Vec<HistoryTurn>,
    left_text: String,
    right_text: String,
}

impl EvalPair {
    pub fn new(
        pair_id: impl Into<String>,
        key: &UtteranceKey,
        history: Vec<HistoryTurn>,
        left_text: impl Into<String>,
        right_text: impl Into<String>,
    ) -> Result<Self, HumEvalError> {
        let (left_text, right_text) = (left_text.into(), right_text.into());
        if left_text == right_text {
            return Err(HumEvalError::IdenticalTexts {
                dialogue_id: key.dialogue_id.clone(),
                index: key.index,
            });
        }
        Ok(EvalPair {
            pair_id: pair_id.into(),
            dialogue_id: key.dialogue_id.clone(),
            utterance_index: key.index,
            history,
            left_text,
            right_text,
        })
    }

    pub fn pair_id(&self) -> &str {
        &self.pair_id
    }

    pub fn dialogue_id(&self) -> &str {
        &self.dialogue_id
    }

    pub fn utterance_index(&self) -> usize {
        self.utterance_index
    }

    pub fn history(&self) -> &[HistoryTurn] {
        &self.history
    }

    pub fn left_text(&self) -> &str {
        &self.left_text
    }

    pub fn right_text(&self) -> &str {
        &self.right_text
    }
}

/// The sealed half of a pair: who is where.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenAssignment {
    pub pair_id: String,
    pub proposed_side: Side,
    pub baseline_id: String,
    pub history_system_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub pairs: Vec<EvalPair>,
    pub assignments: Vec<HiddenAssignment>,
}

impl PairSet {
    /// Writes the annotator-facing task file and the sealed assignment file.
    pub fn write(&self, tasks: &Path, assignments: &Path) -> Result<(), HumEvalError> {
        write_jsonl(tasks, &self.pairs)?;
        write_jsonl(assignments, &self.assignments)?;
        Ok(())
    }
}

/// Three-way fan-out of each key: proposed against every baseline.
///
/// For each pair the history comes from one system drawn uniformly from all
/// systems, and the proposed text lands left or right with probability 1/2.
/// Pairs are then shuffled and numbered.
pub fn build_pairs(
    keys: &[UtteranceKey],
    systems: &EvalSystems<'_>,
    seed: u64,
) -> Result<PairSet, HumEvalError> {
    systems.validate()?;
    let all = systems.all();
    let (proposed_id, proposed) = systems.proposed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drafts = Vec::with_capacity(keys.len() * systems.baselines.len());
    for key in keys {
        let p = systems.dialogue(proposed_id, proposed, &key.dialogue_id)?;
        let proposed_text = p
            .utterances()
            .get(key.index)
            .ok_or_else(|| HumEvalError::Misaligned {
                system: proposed_id.to_string(),
                dialogue_id: key.dialogue_id.clone(),
            })?
            .text();
        for (baseline_id, corpus) in systems.baselines {
            let b = systems.dialogue(baseline_id, corpus, &key.dialogue_id)?;
            if b.len() != p.len() {
                return Err(HumEvalError::Misaligned {
                    system: baseline_id.clone(),
                    dialogue_id: key.dialogue_id.clone(),
                });
            }
            let baseline_text = b.utterances()[key.index].text();
            let (history_id, history_corpus) = all[rng.random_range(0..all.len())];
            let h = systems.dialogue(history_id, history_corpus, &key.dialogue_id)?;
            let history = h.utterances()[key.index.saturating_sub(HISTORY_TURNS)..key.index]
                .iter()
                .map(|u| HistoryTurn {
                    role: u.role(),
                    text: u.text().to_string(),
                })
                .collect();
            let proposed_side = if rng.random_bool(0.5) {
                Side::Left
            } else {
                Side::Right
            };
            let (left, right) = match proposed_side {
                Side::Left => (proposed_text, baseline_text),
                Side::Right => (baseline_text, proposed_text),
            };
            let pair = EvalPair::new(String::new(), key, history, left, right)?;
            drafts.push((
                pair,
                HiddenAssignment {
                    pair_id: String::new(),
                    proposed_side,
                    baseline_id: baseline_id.clone(),
                    history_system_id: history_id.to_string(),
                },
            ));
        }
    }
    drafts.shuffle(&mut rng);
    let width = drafts.len().to_string().len().max(3);
    let (pairs, assignments) = drafts
        .into_iter()
        .enumerate()
        .map(|(i, (mut pair, mut hidden))| {
            let id = format!("p{:0width$}", i + 1);
            pair.pair_id = id.clone();
            hidden.pair_id = id;
            (pair, hidden)
        })
        .unzip();
    Ok(PairSet { pairs, assignments })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub pair_id: String,
    pub annotator_id: String,
    pub choice: Choice,
    pub elapsed_s: f64,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// Every judgment counts on its own.
    #[default]
    Pooled,
    /// One verdict per pair by majority; tied pairs are left out.
    MajorityVote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub baseline_id: String,
    pub win: usize,
    pub lose: usize,
    pub undecided: usize,
    /// Pairs dropped by majority vote because their votes were tied.
    pub tied_pairs: usize,
    pub win_rate: f64,
    pub ci95: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanEvalReport {
    pub mode: AggregationMode,
    pub baselines: Vec<BaselineResult>,
}

impl HumanEvalReport {
    pub fn baseline(&self, id: &str) -> Option<&BaselineResult> {
        self.baselines.iter().find(|b| b.baseline_id == id)
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "{:<16}{:>6}{:>6}{:>8}  95% CI\n",
            "baseline", "win", "lose", "win%"
        );
        for b in &self.baselines {
            out.push_str(&format!(
                "{:<16}{:>6}{:>6}{:>7.1}%  [{:.1}%, {:.1}%]\n",
                b.baseline_id,
                b.win,
                b.lose,
                100.0 * b.win_rate,
                100.0 * b.ci95.0,
                100.0 * b.ci95.1
            ));
        }
        out
    }
}

/// Wilson score interval at 95% confidence; (0, 1) for zero trials.
pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = Normal::standard().inverse_cdf(0.975);
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Unblinds judgments and counts wins for the proposed system per baseline.
pub fn aggregate_judgments(
    assignments: &[HiddenAssignment],
    judgments: &[Judgment],
    mode: AggregationMode,
) -> Result<HumanEvalReport, HumEvalError> {
    let by_pair: HashMap<&str, &HiddenAssignment> = assignments
        .iter()
        .map(|a| (a.pair_id.as_str(), a))
        .collect();
    let mut seen = HashSet::new();
    // pair -> (votes for proposed, votes against, undecided)
    let mut votes: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for j in judgments {
        if !by_pair.contains_key(j.pair_id.as_str()) {
            return Err(HumEvalError::UnknownPair(j.pair_id.clone()));
        }
        if !seen.insert((j.pair_id.as_str(), j.annotator_id.as_str())) {
            return Err(HumEvalError::DuplicateJudgment {
                pair_id: j.pair_id.clone(),
                annotator_id: j.annotator_id.clone(),
            });
        }
        let hidden = by_pair[j.pair_id.as_str()];
        let entry = votes.entry(j.pair_id.as_str()).or_default();
        match j.choice.side() {
            Some(side) if side == hidden.proposed_side => entry.0 += 1,
            Some(_) => entry.1 += 1,
            None => entry.2 += 1,
        }
    }

    let mut baseline_order: Vec<&str> = Vec::new();
    for a in assignments {
        if !baseline_order.contains(&a.baseline_id.as_str()) {
            baseline_order.push(&a.baseline_id);
        }
    }
    let mut tallies: BTreeMap<&str, BaselineResult> = baseline_order
        .iter()
        .map(|id| {
            (
                *id,
                BaselineResult {
                    baseline_id: id.to_string(),
                    win: 0,
                    lose: 0,
                    undecided: 0,
                    tied_pairs: 0,
                    win_rate: 0.0,
                    ci95: (0.0, 1.0),
                },
            )
        })
        .collect();
    for (pair_id, (pro, con, undecided)) in votes {
        let t = tallies
            .get_mut(by_pair[pair_id].baseline_id.as_str())
            .expect("baseline registered");
        match mode {
            AggregationMode::Pooled => {
                t.win += pro;
                t.lose += con;
                t.undecided += undecided;
            }
            AggregationMode::MajorityVote => match pro.cmp(&con) {
                std::cmp::Ordering::Greater => t.win += 1,
                std::cmp::Ordering::Less => t.lose += 1,
                std::cmp::Ordering::Equal if pro > 0 => t.tied_pairs += 1,
                std::cmp::Ordering::Equal => t.undecided += 1,
            },
        }
    }
    let baselines = baseline_order
        .iter()
        .map(|id| {
            let mut t = tallies.remove(id).expect("baseline registered");
            let n = t.win + t.lose;
            t.win_rate = if n == 0 { 0.0 } else { t.win as f64 / n as f64 };
            t.ci95 = wilson_interval(t.win, n);
            t
        })
        .collect();
    Ok(HumanEvalReport { mode, baselines })
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), HumEvalError> {
    let mut bytes = Vec::new();
    for r in records {
        serde_json::to_writer(&mut bytes, r).map_err(std::io::Error::other)?;
        bytes.push(b'\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, HumEvalError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| HumEvalError::MalformedRecord {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;

    fn corpus(tag: &str, n: usize, len: usize, same_as_proposed_at: &[usize]) -> Corpus {
        let dialogues = (0..n)
            .map(|d| {
                let utterances = (0..len)
                    .map(|i| {
                        let role = if i % 2 == 0 {
                            Role::Counselor
                        } else {
                            Role::Client
                        };
                        let text = if same_as_proposed_at.contains(&i) {
                            format!("shared {d}-{i}")
                        } else {
                            format!("{tag} {d}-{i}")
                        };
                        Utterance::new(role, text).unwrap()
                    })
                    .collect();
                Dialogue::new(format!("d{d}"), "en", utterances).unwrap()
            })
            .collect();
        Corpus::new("en", dialogues).unwrap()
    }

    fn systems_fixture(shared: &[usize]) -> (Corpus, Vec<(String, Corpus)>) {
        let proposed = corpus("P", 12, 15, shared);
        let baselines = ["gpt", "gemini", "grok"]
            .iter()
            .map(|b| (b.to_string(), corpus(b, 12, 15, shared)))
            .collect();
        (proposed, baselines)
    }

    fn key(i: usize) -> UtteranceKey {
        UtteranceKey {
            dialogue_id: "d0".into(),
            index: i,
        }
    }

    #[test]
    fn selection_and_pairs() {
        let (proposed, baselines) = systems_fixture(&[]);
        let systems = EvalSystems {
            proposed: ("proposed", &proposed),
            baselines: &baselines,
        };
        let sel = select_eval_utterances(&systems, 10, 10, 3).unwrap();
        assert_eq!(sel.keys.len(), 100);
        assert_eq!(sel, select_eval_utterances(&systems, 10, 10, 3).unwrap());
        let set = build_pairs(&sel.keys, &systems, 3).unwrap();
        assert_eq!(set.pairs.len(), 300);
        for (p, a) in set.pairs.iter().zip(&set.assignments) {
            assert_eq!(p.pair_id, a.pair_id);
            assert_eq!(p.history.len(), p.utterance_index.min(HISTORY_TURNS));
            assert_ne!(p.left_text, p.right_text);
        }
    }

    #[test]
    fn ineligible_dialogues_are_rejected() {
        // 6 shared positions leave 9 eligible utterances per dialogue
        let (proposed, baselines) = systems_fixture(&[0, 1, 2, 3, 4, 5]);
        let systems = EvalSystems {
            proposed: ("proposed", &proposed),
            baselines: &baselines,
        };
        assert!(matches!(
            select_eval_utterances(&systems, 10, 10, 1),
            Err(HumEvalError::InsufficientEligibleDialogues {
                needed: 10,
                found: 0
            })
        ));
        let sel = select_eval_utterances(&systems, 10, 9, 1).unwrap();
        assert!(sel.rejected.is_empty());
        assert!(sel.keys.iter().all(|k| k.index >= 6));
    }

    #[test]
    fn index_zero_has_no_history() {
        let (proposed, baselines) = systems_fixture(&[]);
        let systems = EvalSystems {
            proposed: ("proposed", &proposed),
            baselines: &baselines,
        };
        let set = build_pairs(&[key(0), key(2), key(9)], &systems, 5).unwrap();
        for p in &set.pairs {
            assert_eq!(p.history.len(), p.utterance_index.min(4));
        }
    }

    fn judgment(pair: &str, annotator: &str, choice: Choice) -> Judgment {
        Judgment {
            pair_id: pair.into(),
            annotator_id: annotator.into(),
            choice,
            elapsed_s: 3.0,
            timestamp: DateTime::<Utc>::from_timestamp(0, 0).unwrap(),
        }
    }

    fn hidden(pair: &str, side: Side, baseline: &str) -> HiddenAssignment {
        HiddenAssignment {
            pair_id: pair.into(),
            proposed_side: side,
            baseline_id: baseline.into(),
            history_system_id: "gpt".into(),
        }
    }

    #[test]
    fn unblinding_follows_the_hidden_side() {
        let assignments = vec![
            hidden("p1", Side::Left, "gpt"),
            hidden("p2", Side::Right, "gpt"),
        ];
        let judgments = vec![
            judgment("p1", "a", Choice::Left),
            judgment("p2", "a", Choice::Right),
        ];
        let report =
            aggregate_judgments(&assignments, &judgments, AggregationMode::Pooled).unwrap();
        let gpt = report.baseline("gpt").unwrap();
        assert_eq!((gpt.win, gpt.lose), (2, 0));
        assert_eq!(gpt.win_rate, 1.0);

        let even = vec![
            judgment("p1", "a", Choice::Left),
            judgment("p2", "a", Choice::Left),
        ];
        let report = aggregate_judgments(&assignments, &even, AggregationMode::Pooled).unwrap();
        assert_eq!(report.baseline("gpt").unwrap().win_rate, 0.5);
    }

    #[test]
    fn majority_vote_and_errors() {
        let assignments = vec![
            hidden("p1", Side::Left, "gpt"),
            hidden("p2", Side::Left, "grok"),
        ];
        let judgments = vec![
            judgment("p1", "a", Choice::Left),
            judgment("p1", "b", Choice::Left),
            judgment("p1", "c", Choice::Right),
            judgment("p2", "a", Choice::Left),
            judgment("p2", "b", Choice::Right),
        ];
        let report =
            aggregate_judgments(&assignments, &judgments, AggregationMode::MajorityVote).unwrap();
        assert_eq!(report.baseline("gpt").unwrap().win, 1);
        assert_eq!(report.baseline("grok").unwrap().tied_pairs, 1);
        let pooled =
            aggregate_judgments(&assignments, &judgments, AggregationMode::Pooled).unwrap();
        assert_eq!((pooled.baselines[0].win, pooled.baselines[0].lose), (2, 1));

        let dup = vec![
            judgment("p1", "a", Choice::Left),
            judgment("p1", "a", Choice::Right),
        ];
        assert!(matches!(
            aggregate_judgments(&assignments, &dup, AggregationMode::Pooled),
            Err(HumEvalError::DuplicateJudgment { .. })
        ));
        assert!(matches!(
            aggregate_judgments(
                &assignments,
                &[judgment("zz", "a", Choice::Left)],
                AggregationMode::Pooled
            ),
            Err(HumEvalError::UnknownPair(_))
        ));
    }

    #[test]
    fn wilson_bounds() {
        let (lo, hi) = wilson_interval(50, 100);
        assert!((lo - 0.4038).abs() < 1e-3 && (hi - 0.5962).abs() < 1e-3);
        assert_eq!(wilson_interval(0, 0), (0.0, 1.0));
        let (lo, hi) = wilson_interval(10, 10);
        assert!(lo > 0.7 && hi == 1.0);
    }

    #[test]
    fn identical_texts_rejected() {
        assert!(EvalPair::new("p", &key(0), vec![], "same", "same").is_err());
    }
}
