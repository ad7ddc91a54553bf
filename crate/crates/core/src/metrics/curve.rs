use super::RunRecord;
use crate::error::{Error, Result};

/// Stability and convergence summary of a loss curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveStats {
    /// Mean of `|loss[t+1] − loss[t]|`.
    pub mean_abs_successive_diff: f64,
    /// Mean over sliding windows of the population standard deviation
    /// inside each window.
    pub windowed_std: f64,
    /// Largest upward jump `loss[t+1] − loss[t]`, or 0.
    pub max_spike: f64,
    /// Mean loss over the run.
    pub auc: f64,
    /// Iteration at which the trailing-window mean first drops below the
    /// threshold.
    pub iters_to_threshold: Option<usize>,
}

pub fn curve_stats(records: &[RunRecord], window: usize, threshold: Option<f64>) -> Result<CurveStats> {
    let losses: Vec<f64> = records.iter().map(|r| r.outer_loss).collect();
    let mut stats = curve_stats_values(&losses, window, threshold)?;
    stats.iters_to_threshold = stats.iters_to_threshold.map(|i| records[i].outer_iter);
    Ok(stats)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_std(xs: &[f64]) -> f64 {
    if xs.iter().all(|&x| x == xs[0]) {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// [`curve_stats`] on a bare loss sequence; `iters_to_threshold` is an
/// index into `losses`. A window longer than the curve covers all of it.
pub fn curve_stats_values(losses: &[f64], window: usize, threshold: Option<f64>) -> Result<CurveStats> {
    if losses.len() < 2 {
        return Err(Error::Contract(format!(
            "curve statistics need at least 2 points, got {}",
            losses.len()
        )));
    }
    if window < 2 {
        return Err(Error::Contract(format!("window must be at least 2, got {window}")));
    }
    let diffs: Vec<f64> = losses.windows(2).map(|w| w[1] - w[0]).collect();
    let mean_abs_successive_diff = diffs.iter().map(|d| d.abs()).sum::<f64>() / diffs.len() as f64;
    let max_spike = diffs.iter().copied().fold(0.0, f64::max);
    let w = window.min(losses.len());
    let stds: Vec<f64> = losses.windows(w).map(population_std).collect();
    let iters_to_threshold = threshold.and_then(|thr| {
        (0..losses.len()).find(|&t| mean(&losses[(t + 1).saturating_sub(window)..=t]) < thr)
    });
    Ok(CurveStats {
        mean_abs_successive_diff,
        windowed_std: mean(&stds),
        max_spike,
        auc: mean(losses),
        iters_to_threshold,
    })
}
