//! Run summaries and seed-matched comparison tables.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::sim::MetricsLog;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("cannot summarize an empty log")]
    EmptyLog,
    #[error("no arms to compare")]
    NoArms,
    #[error("arm `{arm}` has a different seed set from arm `{reference}`")]
    SeedMismatch { arm: String, reference: String },
    #[error("arm `{0}` lists a seed more than once")]
    DuplicateSeed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub steps: usize,
    pub final_error: f64,
    pub average_error: f64,
    /// RMS dispersion at the last step.
    pub final_std: f64,
    pub convergence_time: Option<usize>,
    pub resample_count: usize,
}

pub fn summarize(log: &MetricsLog, label: &str, seed: u64, radius: f64) -> Result<RunSummary, MetricsError> {
    let last = log.steps.last().ok_or(MetricsError::EmptyLog)?;
    Ok(RunSummary {
        label: label.to_string(),
        seed,
        steps: log.len(),
        final_error: last.error,
        average_error: log.average_error().ok_or(MetricsError::EmptyLog)?,
        final_std: last.rms_dispersion,
        convergence_time: log.convergence_time(radius),
        resample_count: log.resample_count(),
    })
}

/// `"-"` for a run that never converged.
pub fn format_convergence(t: Option<usize>) -> String {
    t.map_or_else(|| "-".to_string(), |t| t.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    FinalError,
    AverageError,
    FinalStd,
    ConvergenceTime,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::FinalError, Metric::AverageError, Metric::FinalStd, Metric::ConvergenceTime];

    pub fn label(&self) -> &'static str {
        match self {
            Metric::FinalError => "final_error",
            Metric::AverageError => "average_error",
            Metric::FinalStd => "final_std",
            Metric::ConvergenceTime => "convergence_time",
        }
    }

    /// Lower is better for every metric; `None` (never converged) is worst.
    pub fn value(&self, s: &RunSummary) -> Option<f64> {
        match self {
            Metric::FinalError => Some(s.final_error),
            Metric::AverageError => Some(s.average_error),
            Metric::FinalStd => Some(s.final_std),
            Metric::ConvergenceTime => s.convergence_time.map(|t| t as f64),
        }
    }
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub metric: Metric,
    /// Runs with a value; non-converged runs are excluded from the quantiles.
    pub count: usize,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
}

impl Aggregate {
    pub fn iqr(&self) -> Option<f64> {
        Some(self.q3? - self.q1?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmTable {
    pub label: String,
    pub runs: usize,
    pub aggregates: Vec<Aggregate>,
}

impl ArmTable {
    pub fn aggregate(&self, metric: Metric) -> &Aggregate {
        self.aggregates.iter().find(|a| a.metric == metric).expect("every metric is aggregated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WinRate {
    pub metric: Metric,
    pub arm: String,
    pub against: String,
    /// Fraction of seeds where `arm` beats `against`; ties count one half.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub arms: Vec<ArmTable>,
    pub win_rates: Vec<WinRate>,
}

impl Comparison {
    pub fn win_rate(&self, metric: Metric, arm: &str, against: &str) -> Option<f64> {
        self.win_rates
            .iter()
            .find(|w| w.metric == metric && w.arm == arm && w.against == against)
            .map(|w| w.rate)
    }
}

fn score(a: Option<f64>, b: Option<f64>) -> f64 {
    match (a, b) {
        (Some(x), Some(y)) if x < y => 1.0,
        (Some(x), Some(y)) if x > y => 0.0,
        (Some(_), Some(_)) | (None, None) => 0.5,
        (Some(_), None) => 1.0,
        (None, Some(_)) => 0.0,
    }
}

/// Compares arms run on the same seeds. Each arm is `(label, summaries)`.
pub fn compare(arms: &[(String, Vec<RunSummary>)]) -> Result<Comparison, MetricsError> {
    let (ref_label, ref_runs) = arms.first().ok_or(MetricsError::NoArms)?;
    let seeds_of = |label: &str, runs: &[RunSummary]| -> Result<BTreeSet<u64>, MetricsError> {
        let set: BTreeSet<u64> = runs.iter().map(|s| s.seed).collect();
        if set.len() != runs.len() {
            return Err(MetricsError::DuplicateSeed(label.to_string()));
        }
        Ok(set)
    };
    let reference = seeds_of(ref_label, ref_runs)?;
    for (label, runs) in arms {
        if seeds_of(label, runs)? != reference {
            return Err(MetricsError::SeedMismatch { arm: label.clone(), reference: ref_label.clone() });
        }
    }

    let tables = arms
        .iter()
        .map(|(label, runs)| ArmTable {
            label: label.clone(),
            runs: runs.len(),
            aggregates: Metric::ALL
                .iter()
                .map(|&metric| {
                    let mut v: Vec<f64> = runs.iter().filter_map(|s| metric.value(s)).collect();
                    v.sort_by(f64::total_cmp);
                    Aggregate {
                        metric,
                        count: v.len(),
                        median: quantile(&v, 0.5),
                        q1: quantile(&v, 0.25),
                        q3: quantile(&v, 0.75),
                    }
                })
                .collect(),
        })
        .collect();

    let by_seed = |runs: &[RunSummary], seed: u64| runs.iter().find(|s| s.seed == seed).cloned().expect("seed sets match");
    let mut win_rates = Vec::new();
    for metric in Metric::ALL {
        for (a_label, a_runs) in arms {
            for (b_label, b_runs) in arms {
                if a_label == b_label {
                    continue;
                }
                let total: f64 = reference
                    .iter()
                    .map(|&seed| score(metric.value(&by_seed(a_runs, seed)), metric.value(&by_seed(b_runs, seed))))
                    .sum();
                let rate = if reference.is_empty() { 0.5 } else { total / reference.len() as f64 };
                win_rates.push(WinRate { metric, arm: a_label.clone(), against: b_label.clone(), rate });
            }
        }
    }
    Ok(Comparison { arms: tables, win_rates })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:<18} {:>5} {:>10} {:>10} {:>10}", "arm", "metric", "n", "median", "q1", "q3")?;
        for arm in &self.arms {
            for a in &arm.aggregates {
                writeln!(
                    f,
                    "{:<24} {:<18} {:>5} {:>10} {:>10} {:>10}",
                    arm.label,
                    a.metric.label(),
                    format!("{}/{}", a.count, arm.runs),
                    cell(a.median),
                    cell(a.q1),
                    cell(a.q3)
                )?;
            }
        }
        writeln!(f)?;
        writeln!(f, "{:<18} {:<24} {:<24} {:>6}", "metric", "arm", "against", "win")?;
        for w in &self.win_rates {
            writeln!(f, "{:<18} {:<24} {:<24} {:>6.3}", w.metric.label(), w.arm, w.against, w.rate)?;
        }
        Ok(())
    }
}
