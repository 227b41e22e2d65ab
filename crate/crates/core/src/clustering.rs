//! Ward agglomerative clustering with silhouette-based choice of k.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusteringError {
    #[error("k = {k} outside [1, {n}]")]
    KOutOfRange { k: usize, n: usize },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("silhouette needs at least two clusters")]
    SingleCluster,
    #[error("{labels} labels for {points} points")]
    LengthMismatch { points: usize, labels: usize },
    #[error("empty candidate range [{k_min}, {k_max}]")]
    EmptyRange { k_min: usize, k_max: usize },
}

/// One agglomeration step. Clusters are named by their smallest member index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub keep: usize,
    pub absorbed: usize,
    /// Increase in within-cluster sum of squares caused by the merge.
    pub cost: f64,
}

fn squared_euclidean(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Full Ward merge sequence (`n - 1` merges).
///
/// Dissimilarities are Ward merge costs `|A||B| / (|A|+|B|) * ||c_A - c_B||^2`,
/// updated with Lance–Williams. Among equal-cost pairs the pair whose
/// (smaller, larger) representative indices is lexicographically smallest wins.
pub fn ward_merges(points: ArrayView2<f64>) -> Vec<Merge> {
    let n = points.nrows();
    let mut cost = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = 0.5 * squared_euclidean(points.row(i), points.row(j));
            cost[i * n + j] = d;
            cost[j * n + i] = d;
        }
    }
    let mut size = vec![1usize; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));

    while active.len() > 1 {
        let mut best: Option<(usize, usize, f64)> = None;
        for (ai, &i) in active.iter().enumerate() {
            for &j in &active[ai + 1..] {
                let c = cost[i * n + j];
                if best.is_none_or(|(_, _, b)| c < b) {
                    best = Some((i, j, c));
                }
            }
        }
        let (i, j, c) = best.expect("at least two active clusters");
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for &k in &active {
            if k == i || k == j {
                continue;
            }
            let nk = size[k] as f64;
            let updated = ((ni + nk) * cost[k * n + i] + (nj + nk) * cost[k * n + j] - nk * c)
                / (ni + nj + nk);
            cost[k * n + i] = updated;
            cost[i * n + k] = updated;
        }
        size[i] += size[j];
        active.retain(|&k| k != j);
        merges.push(Merge {
            keep: i,
            absorbed: j,
            cost: c,
        });
    }
    merges
}

/// Labels after applying the first `n - k` merges, numbered by first appearance.
pub fn cut(n: usize, merges: &[Merge], k: usize) -> Result<Vec<usize>, ClusteringError> {
    if k == 0 || k > n || merges.len() + 1 < n {
        return Err(ClusteringError::KOutOfRange { k, n });
    }
    let mut rep: Vec<usize> = (0..n).collect();
    for m in &merges[..n - k] {
        for r in rep.iter_mut() {
            if *r == m.absorbed {
                *r = m.keep;
            }
        }
    }
    Ok(relabel(&rep))
}

fn relabel(raw: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    raw.iter()
        .map(|r| {
            let next = map.len();
            *map.entry(*r).or_insert(next)
        })
        .collect()
}

pub fn ward_agglomerative(
    points: ArrayView2<f64>,
    k: usize,
) -> Result<Vec<usize>, ClusteringError> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(ClusteringError::KOutOfRange { k, n });
    }
    cut(n, &ward_merges(points), k)
}

/// Mean silhouette with Euclidean distances; points in singleton clusters score 0.
pub fn silhouette_index(points: ArrayView2<f64>, labels: &[usize]) -> Result<f64, ClusteringError> {
    let n = points.nrows();
    if labels.len() != n {
        return Err(ClusteringError::LengthMismatch {
            points: n,
            labels: labels.len(),
        });
    }
    if n < 2 {
        return Err(ClusteringError::TooFewPoints { needed: 2, got: n });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(ClusteringError::SingleCluster);
    }

    let mut total = 0.0;
    let mut sums = vec![0.0f64; k];
    for i in 0..n {
        let own = labels[i];
        if counts[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[labels[j]] += squared_euclidean(points.row(i), points.row(j)).sqrt();
            }
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KRange {
    pub k_min: usize,
    pub k_max: usize,
}

impl Default for KRange {
    fn default() -> Self {
        Self {
            k_min: 2,
            k_max: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub labels: Vec<usize>,
    pub k: usize,
    /// Mean silhouette for every candidate k, ascending.
    pub silhouette_by_k: Vec<(usize, f64)>,
}

impl ClusteringResult {
    pub fn silhouette(&self) -> f64 {
        self.silhouette_by_k
            .iter()
            .find(|(k, _)| *k == self.k)
            .map(|(_, s)| *s)
            .unwrap_or(f64::NAN)
    }
}

/// Clusters for every k in `[k_min, min(k_max, n - 1)]` and keeps the k with
/// the highest silhouette (smallest k on ties).
pub fn select_k_and_cluster(
    points: ArrayView2<f64>,
    range: KRange,
) -> Result<ClusteringResult, ClusteringError> {
    let n = points.nrows();
    if n < 3 {
        return Err(ClusteringError::TooFewPoints { needed: 3, got: n });
    }
    let k_min = range.k_min.max(2);
    let k_max = range.k_max.min(n - 1);
    if k_min > k_max {
        return Err(ClusteringError::EmptyRange { k_min, k_max });
    }
    let merges = ward_merges(points);
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    let mut trace = Vec::with_capacity(k_max - k_min + 1);
    for k in k_min..=k_max {
        let labels = cut(n, &merges, k)?;
        let s = silhouette_index(points, &labels)?;
        trace.push((k, s));
        if best.as_ref().is_none_or(|(_, b, _)| s > *b) {
            best = Some((k, s, labels));
        }
    }
    let (k, _, labels) = best.expect("non-empty range");
    Ok(ClusteringResult {
        labels,
        k,
        silhouette_by_k: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(
        centers: &[(f64, f64)],
        per: usize,
        sigma: f64,
        seed: u64,
    ) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut data = Vec::new();
        let mut truth = Vec::new();
        for (c, &(x, y)) in centers.iter().enumerate() {
            for _ in 0..per {
                data.push(x + noise.sample(&mut rng));
                data.push(y + noise.sample(&mut rng));
                truth.push(c);
            }
        }
        (
            Array2::from_shape_vec((truth.len(), 2), data).unwrap(),
            truth,
        )
    }

    #[test]
    fn k_equals_n_is_identity() {
        let pts = array![[0.0], [1.0], [10.0], [3.0]];
        assert_eq!(ward_agglomerative(pts.view(), 4).unwrap(), [0, 1, 2, 3]);
    }

    #[test]
    fn one_dimensional_three_points() {
        // Merge costs: {0,1} = 0.5, {1,10} = 40.5, {0,10} = 50, so {0,1} merges first.
        let pts = array![[0.0], [1.0], [10.0]];
        assert_eq!(ward_agglomerative(pts.view(), 2).unwrap(), [0, 0, 1]);
        let merges = ward_merges(pts.view());
        assert_eq!(merges[0].cost, 0.5);
        // Second merge: 2*1/3 * (10 - 0.5)^2
        assert!((merges[1].cost - 2.0 / 3.0 * 9.5 * 9.5).abs() < 1e-12);
    }

    #[test]
    fn ties_merge_smallest_pair_first() {
        let pts = array![[0.0], [1.0], [2.0], [3.0]];
        let merges = ward_merges(pts.view());
        assert_eq!((merges[0].keep, merges[0].absorbed), (0, 1));
        assert_eq!((merges[1].keep, merges[1].absorbed), (2, 3));
    }

    #[test]
    fn two_blobs_separate_exactly() {
        let (pts, truth) = blobs(&[(-5.0, 0.0), (5.0, 0.0)], 10, 0.1, 3);
        let labels = ward_agglomerative(pts.view(), 2).unwrap();
        assert_eq!(labels, truth);
    }

    #[test]
    fn k_out_of_range() {
        let pts = array![[0.0], [1.0]];
        assert_eq!(
            ward_agglomerative(pts.view(), 0),
            Err(ClusteringError::KOutOfRange { k: 0, n: 2 })
        );
        assert_eq!(
            ward_agglomerative(pts.view(), 3),
            Err(ClusteringError::KOutOfRange { k: 3, n: 2 })
        );
    }

    #[test]
    fn silhouette_examples() {
        let (pts, truth) = blobs(&[(-5.0, 0.0), (5.0, 0.0)], 10, 0.1, 11);
        let good = silhouette_index(pts.view(), &truth).unwrap();
        assert!(good > 0.9, "{good}");
        let mut split = truth.clone();
        for l in split.iter_mut().take(5) {
            *l = 1;
        }
        let worse = silhouette_index(pts.view(), &split).unwrap();
        assert!(worse < good);
        let singles: Vec<usize> = (0..pts.nrows()).collect();
        assert_eq!(silhouette_index(pts.view(), &singles).unwrap(), 0.0);
        assert_eq!(
            silhouette_index(pts.view(), &vec![0; pts.nrows()]),
            Err(ClusteringError::SingleCluster)
        );
    }

    #[test]
    fn silhouette_hand_computed() {
        // Points 0, 1 | 4: a(0)=1, b(0)=4 -> 0.75; a(1)=1, b(1)=3 -> 2/3; singleton -> 0.
        let pts = array![[0.0], [1.0], [4.0]];
        let s = silhouette_index(pts.view(), &[0, 0, 1]).unwrap();
        assert!((s - (0.75 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn selection_finds_blob_count() {
        let (pts, _) = blobs(&[(-5.0, 0.0), (5.0, 0.0), (0.0, 8.0)], 15, 0.2, 5);
        let result = select_k_and_cluster(pts.view(), KRange::default()).unwrap();
        assert_eq!(result.k, 3);
        assert_eq!(result.silhouette_by_k.len(), 9);
        let (pts, _) = blobs(&[(-5.0, 0.0), (5.0, 0.0)], 15, 0.2, 6);
        assert_eq!(
            select_k_and_cluster(pts.view(), KRange::default())
                .unwrap()
                .k,
            2
        );
    }

    #[test]
    fn selection_clips_range() {
        let pts = array![[0.0], [1.0], [5.0], [6.0], [20.0]];
        let result = select_k_and_cluster(pts.view(), KRange::default()).unwrap();
        let ks: Vec<usize> = result.silhouette_by_k.iter().map(|(k, _)| *k).collect();
        assert_eq!(ks, [2, 3, 4]);
        let best = result
            .silhouette_by_k
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, |m, (_, s)| m.max(s));
        assert_eq!(result.silhouette(), best);
        assert_eq!(result.labels.iter().max().unwrap() + 1, result.k);
        assert_eq!(
            select_k_and_cluster(array![[0.0], [1.0]].view(), KRange::default()),
            Err(ClusteringError::TooFewPoints { needed: 3, got: 2 })
        );
    }
}
