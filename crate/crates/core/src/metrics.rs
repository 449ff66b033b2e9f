//! Ranking agreement between predicted scores and ground truth.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("length mismatch: {pred} predictions, {truth} ground-truth values")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("need at least 2 samples, got {0}")]
    TooFew(usize),
}

/// Kendall's tau with its pair counts.
///
/// `ktau = 2 · concordant / C(n, 2) − 1`; a pair tied in either input is
/// counted as tied, never as concordant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub ktau: f64,
    pub n: usize,
    pub concordant: u64,
    pub discordant: u64,
    pub tied: u64,
}

impl RankReport {
    fn from_counts(n: usize, concordant: u64, discordant: u64, tied: u64) -> Self {
        let pairs = (n as u64) * (n as u64 - 1) / 2;
        RankReport { ktau: 2.0 * concordant as f64 / pairs as f64 - 1.0, n, concordant, discordant, tied }
    }

    /// Plain-text table.
    pub fn to_table(&self) -> String {
        format!(
            "{:<12}{:>12}\n{:<12}{:>12.6}\n{:<12}{:>12}\n{:<12}{:>12}\n{:<12}{:>12}\n{:<12}{:>12}\n",
            "metric", "value", "ktau", self.ktau, "n", self.n, "concordant", self.concordant, "discordant",
            self.discordant, "tied", self.tied
        )
    }
}

fn check(pred: &[f64], truth: &[f64]) -> Result<usize, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch { pred: pred.len(), truth: truth.len() });
    }
    if pred.len() < 2 {
        return Err(MetricError::TooFew(pred.len()));
    }
    Ok(pred.len())
}

/// Exact pair count over all `n(n−1)/2` pairs.
pub fn ktau(pred: &[f64], truth: &[f64]) -> Result<RankReport, MetricError> {
    let n = check(pred, truth)?;
    let (mut concordant, mut discordant, mut tied) = (0u64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let s = (pred[i] - pred[j]) * (truth[i] - truth[j]);
            if s > 0.0 {
                concordant += 1;
            } else if s < 0.0 {
                discordant += 1;
            } else {
                tied += 1;
            }
        }
    }
    Ok(RankReport::from_counts(n, concordant, discordant, tied))
}

/// Same counts as [`ktau`] in `O(n log n)`: sort by `(truth, pred)` and
/// count strict inversions of `pred` with a merge sort.
pub fn ktau_fast(pred: &[f64], truth: &[f64]) -> Result<RankReport, MetricError> {
    let n = check(pred, truth)?;
    let cmp = |a: f64, b: f64| a.partial_cmp(&b).unwrap_or(Ordering::Equal);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| cmp(truth[a], truth[b]).then(cmp(pred[a], pred[b])));

    let tie_pairs = |run_key: &dyn Fn(usize, usize) -> bool, order: &[usize]| -> u64 {
        let mut total = 0u64;
        let mut run = 1u64;
        for w in order.windows(2) {
            if run_key(w[0], w[1]) {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };
    let truth_ties = tie_pairs(&|a, b| truth[a] == truth[b], &idx);
    let both_ties = tie_pairs(&|a, b| truth[a] == truth[b] && pred[a] == pred[b], &idx);

    let mut values: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
    let discordant = count_inversions(&mut values);
    // `values` is now sorted by pred.
    let pred_ties = tie_pairs(&|a, b| values[a] == values[b], &(0..n).collect::<Vec<_>>());

    let pairs = (n as u64) * (n as u64 - 1) / 2;
    let tied = truth_ties + pred_ties - both_ties;
    Ok(RankReport::from_counts(n, pairs - discordant - tied, discordant, tied))
}

/// Number of pairs `i < j` with `v[i] > v[j]`; sorts `v` ascending.
fn count_inversions(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = count_inversions(&mut v[..mid]) + count_inversions(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            count += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..]);
    v.copy_from_slice(&merged);
    count
}

/// Percentage of `population` strictly better (greater) than `value`.
/// `population` is expected sorted in descending order.
pub fn rank_of(value: f64, population_desc: &[f64]) -> f64 {
    if population_desc.is_empty() {
        return 0.0;
    }
    let better = population_desc.partition_point(|&p| p > value);
    100.0 * better as f64 / population_desc.len() as f64
}
