//! Paired significance testing.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

/// Largest effective sample size `Auto` still handles by enumeration.
pub const AUTO_EXACT_MAX_N: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("paired samples differ in length ({x} vs {y})")]
    LengthMismatch { x: usize, y: usize },
    #[error("paired samples are empty")]
    EmptySample,
    #[error("sample contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("{0}")]
    DomainError(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMode {
    Exact,
    Approx,
    #[default]
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Approx,
    /// Every difference was zero.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub n_effective: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_two_sided: f64,
    pub method: WilcoxonMethod,
}

/// Ranks of `values` (1-based), ties sharing the average rank.
///
/// Returned ranks are doubled so that they are always integers.
fn doubled_ranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end, average doubled = start + 1 + end
        let doubled = (start + 1 + end) as u64;
        for &i in &order[start..end] {
            ranks[i] = doubled;
        }
        start = end;
    }
    ranks
}

fn tie_sizes(values: &[f64]) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut sizes = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        sizes.push(j - i);
        i = j;
    }
    sizes
}

/// Null distribution of the doubled W+ statistic: entry `s` is the
/// probability that the positive-signed doubled ranks sum to `s`.
fn null_distribution(doubled: &[u64]) -> Vec<f64> {
    let total: u64 = doubled.iter().sum();
    let mut dist = vec![0.0f64; total as usize + 1];
    dist[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            let p = dist[s];
            if p != 0.0 {
                dist[s + r] += p * 0.5;
                dist[s] = p * 0.5;
            }
        }
        reach += r;
    }
    dist
}

/// Wilcoxon signed-rank test on the paired differences `x[i] - y[i]`.
///
/// Zero differences are dropped. `Exact` enumerates the sign-flip
/// distribution over the observed (tie-averaged) ranks; `Approx` uses the
/// normal approximation with tie and continuity corrections.
pub fn wilcoxon_signed_rank(
    x: &[f64],
    y: &[f64],
    mode: WilcoxonMode,
) -> Result<WilcoxonResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch {
            x: x.len(),
            y: y.len(),
        });
    }
    if x.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if let Some(i) = x
        .iter()
        .zip(y)
        .position(|(a, b)| !a.is_finite() || !b.is_finite())
    {
        return Err(StatsError::NonFinite(i));
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            n_effective: 0,
            w_plus: 0.0,
            w_minus: 0.0,
            p_two_sided: 1.0,
            method: WilcoxonMethod::Degenerate,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let doubled = doubled_ranks(&abs);
    let total: u64 = doubled.iter().sum();
    let w_plus_doubled: u64 = diffs
        .iter()
        .zip(&doubled)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let w_plus = w_plus_doubled as f64 / 2.0;
    let w_minus = (total - w_plus_doubled) as f64 / 2.0;

    let exact = match mode {
        WilcoxonMode::Exact => true,
        WilcoxonMode::Approx => false,
        WilcoxonMode::Auto => n <= AUTO_EXACT_MAX_N,
    };
    let p = if exact {
        let t = w_plus_doubled.min(total - w_plus_doubled) as usize;
        let dist = null_distribution(&doubled);
        2.0 * dist[..=t].iter().sum::<f64>()
    } else {
        let nf = n as f64;
        let ties: f64 = tie_sizes(&abs)
            .into_iter()
            .map(|t| {
                let t = t as f64;
                t * t * t - t
            })
            .sum();
        let variance = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        let mean = nf * (nf + 1.0) / 4.0;
        if variance <= 0.0 {
            1.0
        } else {
            let numerator = ((w_plus - mean).abs() - 0.5).max(0.0);
            let z = numerator / variance.sqrt();
            erfc(z / std::f64::consts::SQRT_2)
        }
    };
    Ok(WilcoxonResult {
        n_effective: n,
        w_plus,
        w_minus,
        p_two_sided: p.min(1.0),
        method: if exact {
            WilcoxonMethod::Exact
        } else {
            WilcoxonMethod::Approx
        },
    })
}

/// Bonferroni adjustment for `m` comparisons: `min(1, m * p)`.
pub fn bonferroni(p: f64, m: u32) -> Result<f64, StatsError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(StatsError::DomainError(format!(
            "p-value {p} is outside [0, 1]"
        )));
    }
    if m == 0 {
        return Err(StatsError::DomainError(
            "number of comparisons must be at least 1".into(),
        ));
    }
    Ok((p * f64::from(m)).min(1.0))
}
