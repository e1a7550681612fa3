//! Scoring: multiclass Brier score, prediction-market return, utility
//! policies, weekly reports, and portfolio accounting.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::{Forecast, Outcome};

/// Errors from scoring and report writing.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("forecast has {forecast} components but outcome has {outcome}")]
    DimensionMismatch { forecast: usize, outcome: usize },
    #[error("market price at index {index} is {value}, outside [0, 1]")]
    InvalidPrice { index: usize, value: f64 },
    #[error("cannot build a report from an empty batch")]
    EmptyBatch,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Multiclass Brier score: `Σ_k (p̂_k − y_k)²`, in `[0, 2]`. Lower is better.
pub fn brier(forecast: &Forecast, outcome: &Outcome) -> Result<f64, MetricsError> {
    let probs = forecast.probs();
    if probs.len() != outcome.k() {
        return Err(MetricsError::DimensionMismatch {
            forecast: probs.len(),
            outcome: outcome.k(),
        });
    }
    let mut score = 0.0;
    for (k, p) in probs.iter().enumerate() {
        let y = if k == outcome.winner() { 1.0 } else { 0.0 };
        let diff = p - y;
        score += diff * diff;
    }
    Ok(score)
}

/// Market return from unit long positions.
///
/// For every candidate whose forecast probability **strictly** exceeds its
/// market price, a one-unit position is taken that pays `y_k − m_k`
/// (`y_k ∈ {0, 1}`). Ties take no position. The result is the sum of payoffs.
pub fn market_return(
    forecast: &Forecast,
    prices: &[f64],
    outcome: &Outcome,
) -> Result<f64, MetricsError> {
    let probs = forecast.probs();
    if probs.len() != outcome.k() {
        return Err(MetricsError::DimensionMismatch {
            forecast: probs.len(),
            outcome: outcome.k(),
        });
    }
    if prices.len() != probs.len() {
        return Err(MetricsError::DimensionMismatch {
            forecast: probs.len(),
            outcome: prices.len(),
        });
    }
    for (index, &value) in prices.iter().enumerate() {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(MetricsError::InvalidPrice { index, value });
        }
    }
    let mut total = 0.0;
    for (k, (&p, &m)) in probs.iter().zip(prices).enumerate() {
        if p > m {
            let y = if k == outcome.winner() { 1.0 } else { 0.0 };
            total += y - m;
        }
    }
    Ok(total)
}

/// How a forecast's quality is collapsed into the scalar utility whose
/// memory-on/memory-off difference drives weight updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityPolicy {
    /// `utility = −Brier` (default).
    #[default]
    NegBrier,
    /// `utility = 1` if the highest-probability candidate won else `0`;
    /// probability ties resolve to the lowest index.
    Accuracy,
}

impl UtilityPolicy {
    /// Scalar utility of a forecast against an outcome.
    pub fn utility(&self, forecast: &Forecast, outcome: &Outcome) -> Result<f64, MetricsError> {
        match self {
            UtilityPolicy::NegBrier => Ok(-brier(forecast, outcome)?),
            UtilityPolicy::Accuracy => {
                let probs = forecast.probs();
                if probs.len() != outcome.k() {
                    return Err(MetricsError::DimensionMismatch {
                        forecast: probs.len(),
                        outcome: outcome.k(),
                    });
                }
                let mut arg_max = 0;
                for (k, &p) in probs.iter().enumerate() {
                    if p > probs[arg_max] {
                        arg_max = k;
                    }
                }
                Ok(if arg_max == outcome.winner() {
                    1.0
                } else {
                    0.0
                })
            }
        }
    }
}

/// Per-task scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_id: String,
    pub brier: f64,
    /// Present only when the task carried market prices.
    pub market_return: Option<f64>,
    pub utility: f64,
}

/// Scores one forecast against one outcome under a utility policy.
pub fn score_task(
    policy: UtilityPolicy,
    task_id: &str,
    forecast: &Forecast,
    prices: Option<&[f64]>,
    outcome: &Outcome,
) -> Result<TaskScore, MetricsError> {
    let brier_score = brier(forecast, outcome)?;
    let market = match prices {
        Some(p) => Some(market_return(forecast, p, outcome)?),
        None => None,
    };
    Ok(TaskScore {
        task_id: task_id.to_owned(),
        brier: brier_score,
        market_return: market,
        utility: policy.utility(forecast, outcome)?,
    })
}

/// Cumulative portfolio values from weekly mean returns.
///
/// Each week a fixed `stake` is placed and pays back `stake × (1 + r_week)`;
/// the portfolio starts at zero, so
/// `value_t = value_{t−1} + stake × (1 + r_t)`.
pub fn portfolio_accumulate(mean_returns: &[f64], stake: f64) -> Vec<f64> {
    let mut values = Vec::with_capacity(mean_returns.len());
    let mut value = 0.0;
    for &r in mean_returns {
        value += stake * (1.0 + r);
        values.push(value);
    }
    values
}

/// One week's aggregate results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklyReport {
    pub batch_id: u32,
    pub mean_brier: f64,
    /// Mean market return over the tasks that had prices; `0.0` if none did.
    pub mean_return: f64,
    pub n_tasks: usize,
    pub portfolio_value_after: f64,
}

/// Aggregates task scores into a weekly report and advances the portfolio.
pub fn build_weekly_report(
    batch_id: u32,
    scores: &[TaskScore],
    portfolio_before: f64,
    stake: f64,
) -> Result<WeeklyReport, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyBatch);
    }
    let n = scores.len();
    let mean_brier = scores.iter().map(|s| s.brier).sum::<f64>() / n as f64;
    let returns: Vec<f64> = scores.iter().filter_map(|s| s.market_return).collect();
    let mean_return = if returns.is_empty() {
        0.0
    } else {
        returns.iter().sum::<f64>() / returns.len() as f64
    };
    Ok(WeeklyReport {
        batch_id,
        mean_brier,
        mean_return,
        n_tasks: n,
        portfolio_value_after: portfolio_before + stake * (1.0 + mean_return),
    })
}

/// Writes reports as JSONL (one report per line, field order fixed).
pub fn write_reports_jsonl(path: &Path, reports: &[WeeklyReport]) -> Result<(), MetricsError> {
    let mut out = Vec::new();
    for report in reports {
        serde_json::to_writer(&mut out, report).expect("reports serialize infallibly");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Writes reports as CSV with a fixed header.
pub fn write_reports_csv(path: &Path, reports: &[WeeklyReport]) -> Result<(), MetricsError> {
    let mut out = String::from("batch_id,mean_brier,mean_return,n_tasks,portfolio_value_after\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.batch_id, r.mean_brier, r.mean_return, r.n_tasks, r.portfolio_value_after
        ));
    }
    fs::write(path, out)?;
    Ok(())
}
