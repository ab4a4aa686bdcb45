//! Reference-free scorers behind a file-based exchange.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("scorer process failed: {0}")]
    ScorerProcessFailed(String),
    #[error("scorer returned {got} scores for {expected} rows")]
    RowCountMismatch { expected: usize, got: usize },
    #[error("scorer output line {line} is not a number: {text:?}")]
    UnparseableScore { line: usize, text: String },
    #[error("metric {metric} score {score} at row {row} is outside [{lo}, {hi}]")]
    ScoreOutOfRange {
        metric: String,
        row: usize,
        score: f64,
        lo: f64,
        hi: f64,
    },
    #[error("scorer exchange io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    HigherBetter,
    LowerBetter,
}

/// A metric's identity, direction and declared score range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub metric_id: String,
    pub orientation: Orientation,
    pub range: (f64, f64),
}

impl MetricSpec {
    /// XCOMET-style: higher is better, scores in [0, 1].
    pub fn xcomet() -> Self {
        MetricSpec {
            metric_id: "XCOMET".into(),
            orientation: Orientation::HigherBetter,
            range: (0.0, 1.0),
        }
    }

    /// MetricX-style: lower is better, scores in [0, 25].
    pub fn metricx() -> Self {
        MetricSpec {
            metric_id: "MetricX".into(),
            orientation: Orientation::LowerBetter,
            range: (0.0, 25.0),
        }
    }

    pub fn check(&self, row: usize, score: f64) -> Result<f64, ScorerError> {
        let (lo, hi) = self.range;
        if score.is_finite() && score >= lo && score <= hi {
            Ok(score)
        } else {
            Err(ScorerError::ScoreOutOfRange {
                metric: self.metric_id.clone(),
                row,
                score,
                lo,
                hi,
            })
        }
    }

    pub fn arrow(&self) -> &'static str {
        match self.orientation {
            Orientation::HigherBetter => "↑",
            Orientation::LowerBetter => "↓",
        }
    }
}

/// Scores `(source, hypothesis)` rows, one score per row in order.
pub trait Scorer: Send + Sync {
    fn scorer_id(&self) -> &str;
    fn score(&self, rows: &[(String, String)]) -> Result<Vec<f64>, ScorerError>;
}

pub struct ConstantScorer {
    id: String,
    value: f64,
}

impl ConstantScorer {
    pub fn new(value: f64) -> Self {
        ConstantScorer {
            id: format!("constant-{value}"),
            value,
        }
    }
}

impl Scorer for ConstantScorer {
    fn scorer_id(&self) -> &str {
        &self.id
    }

    fn score(&self, rows: &[(String, String)]) -> Result<Vec<f64>, ScorerError> {
        Ok(vec![self.value; rows.len()])
    }
}

/// `min(len(src), len(hyp)) / max(len(src), len(hyp))` over characters;
/// 1.0 when both are empty.
#[derive(Debug, Default)]
pub struct LengthRatioScorer;

pub fn length_ratio(source: &str, hypothesis: &str) -> f64 {
    let a = source.chars().count();
    let b = hypothesis.chars().count();
    if a.max(b) == 0 {
        1.0
    } else {
        a.min(b) as f64 / a.max(b) as f64
    }
}

impl Scorer for LengthRatioScorer {
    fn scorer_id(&self) -> &str {
        "length-ratio"
    }

    fn score(&self, rows: &[(String, String)]) -> Result<Vec<f64>, ScorerError> {
        Ok(rows.iter().map(|(s, h)| length_ratio(s, h)).collect())
    }
}

/// Runs an external program.
///
/// The rows are written as a two-column TSV. `{input}` in the arguments is
/// replaced by its path; `{output}`, if present, by a path the program must
/// write scores to. Without `{output}` the scores are read from stdout.
/// Either way one decimal score per line is expected.
#[derive(Debug, Clone)]
pub struct CommandScorer {
    id: String,
    program: String,
    args: Vec<String>,
}

impl CommandScorer {
    pub fn new(id: impl Into<String>, program: impl Into<String>, args: Vec<String>) -> Self {
        CommandScorer {
            id: id.into(),
            program: program.into(),
            args,
        }
    }

    /// Splits a command line on whitespace; the first word is the program.
    pub fn from_command_line(id: impl Into<String>, command: &str) -> Option<Self> {
        let mut words = command.split_whitespace().map(str::to_string);
        let program = words.next()?;
        Some(CommandScorer::new(id, program, words.collect()))
    }
}

/// Tabs and line breaks inside a cell would break the row structure.
fn tsv_cell(text: &str) -> String {
    text.chars()
        .map(|c| {
            if c == '\t' || c == '\n' || c == '\r' {
                ' '
            } else {
                c
            }
        })
        .collect()
}

pub fn write_tsv(rows: &[(String, String)], mut out: impl Write) -> std::io::Result<()> {
    for (s, h) in rows {
        writeln!(out, "{}\t{}", tsv_cell(s), tsv_cell(h))?;
    }
    Ok(())
}

pub fn parse_scores(text: &str, expected: usize) -> Result<Vec<f64>, ScorerError> {
    let scores = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| ScorerError::UnparseableScore {
                    line: i + 1,
                    text: l.to_string(),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if scores.len() != expected {
        return Err(ScorerError::RowCountMismatch {
            expected,
            got: scores.len(),
        });
    }
    Ok(scores)
}

impl Scorer for CommandScorer {
    fn scorer_id(&self) -> &str {
        &self.id
    }

    fn score(&self, rows: &[(String, String)]) -> Result<Vec<f64>, ScorerError> {
        let dir = tempfile::tempdir()?;
        let input: PathBuf = dir.path().join("input.tsv");
        let output: PathBuf = dir.path().join("scores.txt");
        let mut file = fs::File::create(&input)?;
        write_tsv(rows, &mut file)?;
        file.sync_all()?;
        drop(file);

        let mut uses_output = false;
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| {
                uses_output |= a.contains("{output}");
                a.replace("{input}", &input.to_string_lossy())
                    .replace("{output}", &output.to_string_lossy())
            })
            .collect();
        let result = Command::new(&self.program)
            .args(&args)
            .output()
            .map_err(|e| ScorerError::ScorerProcessFailed(format!("{}: {e}", self.program)))?;
        if !result.status.success() {
            return Err(ScorerError::ScorerProcessFailed(format!(
                "{} exited with {}: {}",
                self.program,
                result.status,
                String::from_utf8_lossy(&result.stderr).trim()
            )));
        }
        let text = if uses_output {
            fs::read_to_string(&output)?
        } else {
            String::from_utf8_lossy(&result.stdout).into_owned()
        };
        parse_scores(&text, rows.len())
    }
}
