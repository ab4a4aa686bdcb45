use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::scorer::MetricSpec;
use super::stats::{bonferroni, wilcoxon_signed_rank, WilcoxonMethod, WilcoxonMode};
use super::{EvalError, ScoreRecord, UtteranceKey};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub metric_id: String,
    pub mean: f64,
    pub n: usize,
    /// Present on baseline rows only.
    pub p_raw: Option<f64>,
    pub p_corrected: Option<f64>,
    pub method: Option<WilcoxonMethod>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemRow {
    pub system_id: String,
    pub proposed: bool,
    pub cells: Vec<MetricCell>,
}

/// Per-system means and per-baseline significance against the proposed system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub metrics: Vec<MetricSpec>,
    pub rows: Vec<SystemRow>,
    pub alpha: f64,
    pub comparisons: u32,
    pub test: String,
    pub zero_differences: String,
    pub mode: WilcoxonMode,
}

impl ComparisonReport {
    pub fn row(&self, system_id: &str) -> Option<&SystemRow> {
        self.rows.iter().find(|r| r.system_id == system_id)
    }

    pub fn cell(&self, system_id: &str, metric_id: &str) -> Option<&MetricCell> {
        self.row(system_id)?
            .cells
            .iter()
            .find(|c| c.metric_id == metric_id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table: one row per baseline, a rule, then the proposed
    /// row. `*` marks a baseline that differs significantly from the proposed
    /// system.
    pub fn render_table(&self) -> String {
        let header: Vec<String> = std::iter::once("System".to_string())
            .chain(
                self.metrics
                    .iter()
                    .map(|m| format!("{}{}", m.metric_id, m.arrow())),
            )
            .collect();
        let body: Vec<Vec<String>> =
            self.rows
                .iter()
                .map(|row| {
                    std::iter::once(row.system_id.clone())
                        .chain(row.cells.iter().map(|c| {
                            format!("{:.3}{}", c.mean, if c.significant { "*" } else { " " })
                        }))
                        .collect()
                })
                .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                body.iter()
                    .map(|r| r[i].chars().count())
                    .chain([header[i].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| -> String {
            let mut out = String::new();
            for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
                let pad = w - cell.chars().count();
                if i == 0 {
                    out.push_str(cell);
                    out.push_str(&" ".repeat(pad));
                } else {
                    out.push_str("  ");
                    out.push_str(&" ".repeat(pad));
                    out.push_str(cell);
                }
            }
            out.trim_end().to_string()
        };
        let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1));
        let mut out = String::new();
        writeln!(out, "{}", line(&header)).unwrap();
        writeln!(out, "{rule}").unwrap();
        for (row, cells) in self.rows.iter().zip(&body) {
            if row.proposed {
                writeln!(out, "{rule}").unwrap();
            }
            writeln!(out, "{}", line(cells)).unwrap();
        }
        writeln!(
            out,
            "* p < {} vs proposed ({} test, Bonferroni x{})",
            self.alpha, self.test, self.comparisons
        )
        .unwrap();
        out
    }
}

/// Builds the comparison over paired per-utterance scores.
///
/// Each baseline is tested against `proposed_id` on every metric; p-values are
/// multiplied by the number of baselines.
pub fn build_comparison_report(
    records: &[ScoreRecord],
    proposed_id: &str,
    baseline_ids: &[String],
    metrics: &[MetricSpec],
    alpha: f64,
    mode: WilcoxonMode,
) -> Result<ComparisonReport, EvalError> {
    let comparisons = baseline_ids.len().max(1) as u32;
    let systems: Vec<&str> = baseline_ids
        .iter()
        .map(String::as_str)
        .chain([proposed_id])
        .collect();

    // metric -> system -> key -> score
    let mut table: BTreeMap<&str, BTreeMap<&str, BTreeMap<&UtteranceKey, f64>>> = BTreeMap::new();
    for r in records {
        let by_key = table
            .entry(r.metric_id.as_str())
            .or_default()
            .entry(r.system_id.as_str())
            .or_default();
        if by_key.insert(&r.key, r.score).is_some() {
            return Err(EvalError::UnpairedRecords {
                metric: r.metric_id.clone(),
                detail: format!(
                    "duplicate score for {} at {}#{}",
                    r.system_id, r.key.dialogue_id, r.key.index
                ),
            });
        }
    }

    let mut rows: Vec<SystemRow> = systems
        .iter()
        .map(|s| SystemRow {
            system_id: s.to_string(),
            proposed: *s == proposed_id,
            cells: Vec::new(),
        })
        .collect();
    for metric in metrics {
        let unpaired = |detail: String| EvalError::UnpairedRecords {
            metric: metric.metric_id.clone(),
            detail,
        };
        let per_system = table
            .get(metric.metric_id.as_str())
            .ok_or_else(|| unpaired("no records".into()))?;
        let proposed = per_system
            .get(proposed_id)
            .ok_or_else(|| unpaired(format!("no records for {proposed_id}")))?;
        let keys: Vec<&&UtteranceKey> = proposed.keys().collect();
        for (row, system) in rows.iter_mut().zip(&systems) {
            let scores = per_system
                .get(system)
                .ok_or_else(|| unpaired(format!("no records for {system}")))?;
            if scores.len() != proposed.len() || !scores.keys().eq(proposed.keys()) {
                return Err(unpaired(format!(
                    "{system} and {proposed_id} were scored on different utterances"
                )));
            }
            let values: Vec<f64> = keys.iter().map(|k| scores[**k]).collect();
            let mean = if values.is_empty() {
                f64::NAN
            } else {
                values.iter().sum::<f64>() / values.len() as f64
            };
            let mut cell = MetricCell {
                metric_id: metric.metric_id.clone(),
                mean,
                n: values.len(),
                p_raw: None,
                p_corrected: None,
                method: None,
                significant: false,
            };
            if !row.proposed {
                let reference: Vec<f64> = keys.iter().map(|k| proposed[**k]).collect();
                let test = wilcoxon_signed_rank(&reference, &values, mode)?;
                let corrected = bonferroni(test.p_two_sided, comparisons)?;
                cell.p_raw = Some(test.p_two_sided);
                cell.p_corrected = Some(corrected);
                cell.method = Some(test.method);
                cell.significant = corrected < alpha;
            }
            row.cells.push(cell);
        }
    }
    Ok(ComparisonReport {
        metrics: metrics.to_vec(),
        rows,
        alpha,
        comparisons,
        test: "Wilcoxon signed-rank".into(),
        zero_differences: "dropped".into(),
        mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(system: &str, metric: &str, scores: &[f64]) -> Vec<ScoreRecord> {
        scores
            .iter()
            .enumerate()
            .map(|(i, s)| ScoreRecord {
                key: UtteranceKey {
                    dialogue_id: "d".into(),
                    index: i,
                },
                system_id: system.into(),
                metric_id: metric.into(),
                score: *s,
            })
            .collect()
    }

    #[test]
    fn identical_systems_are_not_flagged() {
        let scores: Vec<f64> = (0..30).map(|i| f64::from(i) / 40.0).collect();
        let mut all = Vec::new();
        for s in ["a", "b", "c", "p"] {
            all.extend(records(s, "XCOMET", &scores));
        }
        let baselines = vec!["a".to_string(), "b".into(), "c".into()];
        let report = build_comparison_report(
            &all,
            "p",
            &baselines,
            &[MetricSpec::xcomet()],
            0.01,
            WilcoxonMode::Auto,
        )
        .unwrap();
        for b in &baselines {
            let cell = report.cell(b, "XCOMET").unwrap();
            assert_eq!(cell.p_corrected, Some(1.0));
            assert!(!cell.significant);
        }
        assert!(report.cell("p", "XCOMET").unwrap().p_raw.is_none());
    }

    #[test]
    fn unpaired_records_are_rejected() {
        let mut all = records("p", "XCOMET", &[0.1, 0.2]);
        all.extend(records("a", "XCOMET", &[0.1]));
        let err = build_comparison_report(
            &all,
            "p",
            &["a".to_string()],
            &[MetricSpec::xcomet()],
            0.01,
            WilcoxonMode::Auto,
        )
        .unwrap_err();
        assert!(matches!(err, EvalError::UnpairedRecords { .. }));
    }
}
