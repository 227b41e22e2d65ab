//! Partition agreement (adjusted Rand index) and rank correlation.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {needed} items, got {got}")]
    TooFewItems { needed: usize, got: usize },
    #[error("input is constant; correlation undefined")]
    ConstantInput,
    #[error("non-finite input at position {0}")]
    NonFinite(usize),
}

/// Categorical labels over a fixed item order.
///
/// Label values are kept as given; only co-membership matters for comparison.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Partition {
    labels: Vec<usize>,
}

impl Partition {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels }
    }

    /// Numbers distinct keys `0..k` in order of first appearance.
    pub fn from_keys<K, I>(keys: I) -> Self
    where
        K: Eq + Hash,
        I: IntoIterator<Item = K>,
    {
        let mut ids = HashMap::new();
        let labels = keys
            .into_iter()
            .map(|k| {
                let next = ids.len();
                *ids.entry(k).or_insert(next)
            })
            .collect();
        Self { labels }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same partition with labels renumbered by first appearance.
    pub fn canonical(&self) -> Partition {
        Self::from_keys(self.labels.iter().copied())
    }

    pub fn n_clusters(&self) -> usize {
        self.labels
            .iter()
            .collect::<std::collections::HashSet<_>>()
            .len()
    }

    /// True when both partitions group the items identically.
    pub fn same_grouping(&self, other: &Partition) -> bool {
        self.canonical() == other.canonical()
    }
}

impl From<Vec<usize>> for Partition {
    fn from(labels: Vec<usize>) -> Self {
        Self::new(labels)
    }
}

impl From<&[usize]> for Partition {
    fn from(labels: &[usize]) -> Self {
        Self::new(labels.to_vec())
    }
}

fn pairs(n: u64) -> i128 {
    (n as i128) * (n as i128 - 1) / 2
}

/// Hubert–Arabie adjusted Rand index.
///
/// When the denominator vanishes (both partitions a single cluster, or both
/// all singletons) the partitions are identical and the result is 1.0.
pub fn adjusted_rand_index(a: &Partition, b: &Partition) -> Result<f64, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(StatsError::TooFewItems { needed: 2, got: n });
    }
    let mut cells: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        *cells.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    // (index - expected) / (max - expected), scaled by 2 * C(n, 2) so that
    // everything stays integral until the final division.
    let index: i128 = cells.values().map(|&c| pairs(c)).sum();
    let sum_rows: i128 = rows.values().map(|&c| pairs(c)).sum();
    let sum_cols: i128 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n as u64);
    let numer = 2 * index * total - 2 * sum_rows * sum_cols;
    let denom = (sum_rows + sum_cols) * total - 2 * sum_rows * sum_cols;
    if denom == 0 {
        return Ok(if a.same_grouping(b) { 1.0 } else { 0.0 });
    }
    Ok(numer as f64 / denom as f64)
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && xs[order[end + 1]] == xs[order[start]] {
            end += 1;
        }
        let rank = (start + end) as f64 / 2.0 + 1.0;
        for &i in &order[start..=end] {
            ranks[i] = rank;
        }
        start = end + 1;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho as the Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(StatsError::TooFewItems {
            needed: 3,
            got: xs.len(),
        });
    }
    if let Some(i) = xs.iter().chain(ys).position(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite(i % xs.len()));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}
