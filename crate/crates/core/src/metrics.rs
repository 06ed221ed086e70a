//! Rank and linear correlation between predicted and ground-truth scores.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("zero variance in {0} sequence")]
    ZeroVariance(&'static str),
    #[error("sequences of length {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("non-finite ground-truth value")]
    NonFiniteGroundTruth,
    #[error("no results to aggregate")]
    EmptyResults,
}

/// Paired predictions and labels, length >= 2.
#[derive(Debug, Clone)]
pub struct ScorePairs {
    pub predicted: Vec<f64>,
    pub ground_truth: Vec<f64>,
}

impl ScorePairs {
    pub fn new(predicted: Vec<f64>, ground_truth: Vec<f64>) -> Result<Self, MetricError> {
        if predicted.len() != ground_truth.len() {
            return Err(MetricError::LengthMismatch(
                predicted.len(),
                ground_truth.len(),
            ));
        }
        if predicted.len() < 2 {
            return Err(MetricError::TooFewPairs(predicted.len()));
        }
        if ground_truth.iter().any(|v| !v.is_finite()) {
            return Err(MetricError::NonFiniteGroundTruth);
        }
        Ok(ScorePairs {
            predicted,
            ground_truth,
        })
    }
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mean_x;
        let dy = b - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 {
        return Err(MetricError::ZeroVariance("predicted"));
    }
    if var_y == 0.0 {
        return Err(MetricError::ZeroVariance("ground-truth"));
    }
    Ok(cov / (var_x * var_y).sqrt())
}

/// Pearson linear correlation coefficient (population convention; the 1/n
/// factors cancel, so the sample convention gives the identical value).
pub fn plcc(pairs: &ScorePairs) -> Result<f64, MetricError> {
    pearson(&pairs.predicted, &pairs.ground_truth)
}

/// Fractional midranks, 1-based: ties receive the mean of the positions they
/// would occupy in any sorted order.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the average 1-based rank
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank-order correlation: Pearson over fractional midranks. On
/// tie-free data this equals `1 - 6 sum(d^2) / (n (n^2 - 1))`.
pub fn srocc(pairs: &ScorePairs) -> Result<f64, MetricError> {
    let rx = midranks(&pairs.predicted);
    let ry = midranks(&pairs.ground_truth);
    pearson(&rx, &ry).map_err(|e| match e {
        MetricError::ZeroVariance(which) => MetricError::ZeroVariance(which),
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    pub plcc: f64,
    pub srocc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateMetrics {
    pub mean_plcc: f64,
    pub mean_srocc: f64,
    pub std_plcc: f64,
    pub std_srocc: f64,
    pub runs: usize,
}

/// Arithmetic means and sample standard deviations over repeated runs.
pub fn aggregate_runs(results: &[RunMetrics]) -> Result<AggregateMetrics, MetricError> {
    if results.is_empty() {
        return Err(MetricError::EmptyResults);
    }
    let n = results.len() as f64;
    let mean_plcc = results.iter().map(|r| r.plcc).sum::<f64>() / n;
    let mean_srocc = results.iter().map(|r| r.srocc).sum::<f64>() / n;
    let (std_plcc, std_srocc) = if results.len() < 2 {
        (0.0, 0.0)
    } else {
        let vp = results
            .iter()
            .map(|r| (r.plcc - mean_plcc).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        let vs = results
            .iter()
            .map(|r| (r.srocc - mean_srocc).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        (vp.sqrt(), vs.sqrt())
    };
    Ok(AggregateMetrics {
        mean_plcc,
        mean_srocc,
        std_plcc,
        std_srocc,
        runs: results.len(),
    })
}
