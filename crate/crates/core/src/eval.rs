//! Evaluation metrics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::downwash::DownwashFrameResult;
use crate::geometry::Vec3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("{predictions} predictions but {ground_truth} ground-truth positions")]
    CardinalityMismatch { predictions: usize, ground_truth: usize },
    #[error("no samples")]
    Empty,
    #[error("non-finite value in input")]
    NonFinite,
}

/// A frame counts as a success when the number of predictions equals the
/// number of ground-truth neighbors.
pub fn success<P, G>(predictions: &[P], ground_truth: &[G]) -> bool {
    predictions.len() == ground_truth.len()
}

/// Stricter success: equal counts and every optimally matched pair within
/// `radius` [m].
pub fn success_within(predictions: &[Vec3], ground_truth: &[Vec3], radius: f64) -> bool {
    success(predictions, ground_truth)
        && position_errors(predictions, ground_truth).is_ok_and(|e| e.iter().all(|d| *d <= radius))
}

/// Success counts per ground-truth neighbor count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuccessTally {
    /// `(neighbors, successes, frames)` sorted by neighbor count.
    pub rows: Vec<(usize, u64, u64)>,
}

impl SuccessTally {
    pub fn record(&mut self, neighbors: usize, ok: bool) {
        let i = match self.rows.binary_search_by_key(&neighbors, |r| r.0) {
            Ok(i) => i,
            Err(i) => {
                self.rows.insert(i, (neighbors, 0, 0));
                i
            }
        };
        self.rows[i].1 += u64::from(ok);
        self.rows[i].2 += 1;
    }

    pub fn rate(&self) -> f64 {
        let (s, n) = self.rows.iter().fold((0, 0), |(s, n), r| (s + r.1, n + r.2));
        s as f64 / n as f64
    }
}

/// Optimal one-to-one assignment between rows and columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost assignment of a rectangular cost matrix. Every row is
/// matched when `rows <= cols`, otherwise every column.
pub fn hungarian(cost: &DMatrix<f64>) -> Assignment {
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        };
    }
    let mut pairs = if n <= m {
        solve(cost)
    } else {
        let mut p: Vec<_> = solve(&cost.transpose()).into_iter().map(|(c, r)| (r, c)).collect();
        p.sort_unstable();
        p
    };
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(r, c)| cost[(r, c)]).sum();
    Assignment { pairs, total_cost }
}

/// Shortest augmenting path with potentials; requires rows <= cols.
fn solve(a: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let (n, m) = a.shape();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect()
}

/// Euclidean errors of the optimal matching, ordered by prediction index.
pub fn position_errors(predictions: &[Vec3], ground_truth: &[Vec3]) -> Result<Vec<f64>, EvalError> {
    if predictions.len() != ground_truth.len() {
        return Err(EvalError::CardinalityMismatch {
            predictions: predictions.len(),
            ground_truth: ground_truth.len(),
        });
    }
    let cost = DMatrix::from_fn(predictions.len(), ground_truth.len(), |i, j| {
        (predictions[i] - ground_truth[j]).norm()
    });
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    Ok(hungarian(&cost).pairs.iter().map(|&(i, j)| cost[(i, j)]).collect())
}

/// Box-plot summary of an error sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorDistribution {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Extreme samples within 1.5 IQR of the quartiles, never inside the box.
    pub whisker_low: f64,
    pub whisker_high: f64,
}

impl ErrorDistribution {
    pub fn from_samples(samples: &[f64]) -> Result<Self, EvalError> {
        if samples.is_empty() {
            return Err(EvalError::Empty);
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(EvalError::NonFinite);
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let q1 = quantile(&s, 0.25);
        let q3 = quantile(&s, 0.75);
        let iqr = q3 - q1;
        let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        Ok(Self {
            count: s.len(),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            min: s[0],
            q1,
            median: quantile(&s, 0.5),
            q3,
            max: s[s.len() - 1],
            whisker_low: s.iter().copied().find(|x| *x >= lo).map_or(q1, |x| x.min(q1)),
            whisker_high: s.iter().rev().copied().find(|x| *x <= hi).map_or(q3, |x| x.max(q3)),
        })
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn record(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.true_pos += 1,
            (false, true) => self.false_pos += 1,
            (true, false) => self.false_neg += 1,
            (false, false) => self.true_neg += 1,
        }
    }

    pub fn from_results(results: &[DownwashFrameResult]) -> Self {
        let mut c = Self::default();
        for r in results {
            c.record(r.gt_downwash, r.pred_downwash);
        }
        c
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    /// NaN when nothing was predicted positive.
    pub precision: f64,
    /// NaN when there were no positives.
    pub recall: f64,
    /// Zero when there are no true positives.
    pub f1: f64,
}

pub fn classification_metrics(c: &ConfusionCounts) -> ClassificationMetrics {
    let ratio = |num: u64, den: u64| if den == 0 { f64::NAN } else { num as f64 / den as f64 };
    let precision = ratio(c.true_pos, c.true_pos + c.false_pos);
    let recall = ratio(c.true_pos, c.true_pos + c.false_neg);
    let f1 = if c.true_pos == 0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassificationMetrics { precision, recall, f1 }
}
