//! Graded change measures over one target's usages.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Period, Variant};
use crate::embedding::{cosine_distance, mean_vector, EmbeddingError, LayerSet, VectorSet};

/// Pair budget for within-period distances.
pub const DEFAULT_MAX_PAIRS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("period {0} has no usages")]
    EmptyPeriod(Period),
    #[error("usage {0} has no gold cluster")]
    MissingGold(usize),
    #[error("period {period} has {count} usages, need at least 2")]
    TooFewUsages { period: Period, count: usize },
    #[error("{labels} labels for {periods} period tags")]
    LengthMismatch { labels: usize, periods: usize },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Cluster distributions of the two periods over a shared cluster index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDistribution {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Relative cluster frequencies per period, no smoothing.
///
/// Distinct labels map to indices in ascending label order.
pub fn cluster_distributions<L: Ord + Copy>(
    labels: &[L],
    periods: &[Period],
) -> Result<ClusterDistribution, MeasureError> {
    if labels.len() != periods.len() {
        return Err(MeasureError::LengthMismatch {
            labels: labels.len(),
            periods: periods.len(),
        });
    }
    let index: BTreeMap<L, usize> = labels
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    let mut p = vec![0.0; index.len()];
    let mut q = vec![0.0; index.len()];
    for (label, period) in labels.iter().zip(periods) {
        let slot = index[label];
        match period {
            Period::T1 => p[slot] += 1.0,
            Period::T2 => q[slot] += 1.0,
        }
    }
    normalize(&mut p).ok_or(MeasureError::EmptyPeriod(Period::T1))?;
    normalize(&mut q).ok_or(MeasureError::EmptyPeriod(Period::T2))?;
    Ok(ClusterDistribution { p, q })
}

fn normalize(v: &mut [f64]) -> Option<()> {
    let total: f64 = v.iter().sum();
    if total == 0.0 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= total);
    Some(())
}

fn kl_base2(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, mi)| pi * (pi / mi).log2())
        .sum()
}

/// Jensen–Shannon distance: the square root of the base-2 JS divergence, in `[0, 1]`.
pub fn jsd(d: &ClusterDistribution) -> f64 {
    let m: Vec<f64> = d.p.iter().zip(&d.q).map(|(a, b)| 0.5 * (a + b)).collect();
    let divergence = 0.5 * kl_base2(&d.p, &m) + 0.5 * kl_base2(&d.q, &m);
    divergence.max(0.0).sqrt().min(1.0)
}

/// Graded change from gold sense clusters.
pub fn gold_graded_change(gold: &[Option<u32>], periods: &[Period]) -> Result<f64, MeasureError> {
    let labels = gold
        .iter()
        .enumerate()
        .map(|(i, g)| g.ok_or(MeasureError::MissingGold(i)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(jsd(&cluster_distributions(&labels, periods)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum ApdMode {
    /// Mean over every cross-period pair.
    #[default]
    Exact,
    /// Mean over an `n x n` block, `n = min(|V1|, |V2|)`, drawn without replacement.
    Sampled { seed: u64 },
}

fn period_rows(vs: &VectorSet, period: Period) -> Result<Vec<usize>, MeasureError> {
    let rows = vs.indices(period);
    if rows.is_empty() {
        return Err(MeasureError::EmptyPeriod(period));
    }
    Ok(rows)
}

fn mean_cross_distance(
    vs: &VectorSet,
    left: &[usize],
    right: &[usize],
) -> Result<f64, MeasureError> {
    let mut total = 0.0;
    for &i in left {
        for &j in right {
            total += cosine_distance(vs.vectors.row(i), vs.vectors.row(j))?;
        }
    }
    Ok(total / (left.len() * right.len()) as f64)
}

/// Average pairwise cosine distance between period-1 and period-2 vectors.
pub fn apd(vs: &VectorSet, mode: ApdMode) -> Result<f64, MeasureError> {
    let v1 = period_rows(vs, Period::T1)?;
    let v2 = period_rows(vs, Period::T2)?;
    match mode {
        ApdMode::Exact => mean_cross_distance(vs, &v1, &v2),
        ApdMode::Sampled { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = v1.len().min(v2.len());
            let s1: Vec<usize> = index::sample(&mut rng, v1.len(), n)
                .iter()
                .map(|i| v1[i])
                .collect();
            let s2: Vec<usize> = index::sample(&mut rng, v2.len(), n)
                .iter()
                .map(|i| v2[i])
                .collect();
            mean_cross_distance(vs, &s1, &s2)
        }
    }
}

/// Decodes the `p`-th unordered pair `(i, j)`, `i < j`, of `m` items in row-major order.
fn nth_pair(p: usize, m: usize) -> (usize, usize) {
    let mut remaining = p;
    for i in 0..m {
        let row = m - 1 - i;
        if remaining < row {
            return (i, i + 1 + remaining);
        }
        remaining -= row;
    }
    unreachable!("pair index {p} out of range for {m} items")
}

/// Mean within-period cosine distance (APD-OLD for T1, APD-NEW for T2).
///
/// Exact when the period has at most `max_pairs` unordered pairs, otherwise
/// averaged over `max_pairs` distinct pairs drawn with `seed`.
pub fn apd_within(
    vs: &VectorSet,
    period: Period,
    max_pairs: usize,
    seed: u64,
) -> Result<f64, MeasureError> {
    let rows = vs.indices(period);
    let m = rows.len();
    if m < 2 {
        return Err(MeasureError::TooFewUsages { period, count: m });
    }
    let total_pairs = m * (m - 1) / 2;
    let dist =
        |(a, b): (usize, usize)| cosine_distance(vs.vectors.row(rows[a]), vs.vectors.row(rows[b]));
    let mut sum = 0.0;
    let count = if total_pairs <= max_pairs {
        for a in 0..m {
            for b in a + 1..m {
                sum += dist((a, b))?;
            }
        }
        total_pairs
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = index::sample(&mut rng, total_pairs, max_pairs).into_vec();
        picks.sort_unstable();
        for p in picks {
            sum += dist(nth_pair(p, m))?;
        }
        max_pairs
    };
    Ok(sum / count as f64)
}

/// Cosine distance between the period mean vectors.
pub fn cos_change(vs: &VectorSet) -> Result<f64, MeasureError> {
    period_rows(vs, Period::T1)?;
    period_rows(vs, Period::T2)?;
    let m1 = mean_vector(vs, Some(Period::T1))?;
    let m2 = mean_vector(vs, Some(Period::T2))?;
    Ok(cosine_distance(m1.view(), m2.view())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Jsd,
    Apd,
    ApdOld,
    ApdNew,
    Cos,
}

impl Measure {
    pub const ALL: [Measure; 5] = [
        Measure::Jsd,
        Measure::Apd,
        Measure::ApdOld,
        Measure::ApdNew,
        Measure::Cos,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Measure::Jsd => "jsd",
            Measure::Apd => "apd",
            Measure::ApdOld => "apd_old",
            Measure::ApdNew => "apd_new",
            Measure::Cos => "cos",
        }
    }
}

impl std::fmt::Display for Measure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Measure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Measure::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| format!("unknown measure {s:?}"))
    }
}

/// Change scores for one lemma under one layer set and variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeScores {
    pub lemma: String,
    pub layer_set: LayerSet,
    pub variant: Variant,
    pub jsd: Option<f64>,
    pub apd: Option<f64>,
    pub apd_old: Option<f64>,
    pub apd_new: Option<f64>,
    pub cos: Option<f64>,
    /// Seed the sampling steps were derived from.
    pub seed: u64,
}

impl ChangeScores {
    pub fn get(&self, measure: Measure) -> Option<f64> {
        match measure {
            Measure::Jsd => self.jsd,
            Measure::Apd => self.apd,
            Measure::ApdOld => self.apd_old,
            Measure::ApdNew => self.apd_new,
            Measure::Cos => self.cos,
        }
    }

    pub fn set(&mut self, measure: Measure, value: f64) {
        let slot = match measure {
            Measure::Jsd => &mut self.jsd,
            Measure::Apd => &mut self.apd,
            Measure::ApdOld => &mut self.apd_old,
            Measure::ApdNew => &mut self.apd_new,
            Measure::Cos => &mut self.cos,
        };
        *slot = Some(value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Period::{T1, T2};
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn vs(rows: Array2<f64>, periods: Vec<Period>) -> VectorSet {
        VectorSet::new(rows, periods, LayerSet::single(1).unwrap()).unwrap()
    }

    fn fig1() -> (Vec<u32>, Vec<Period>) {
        let mut labels = Vec::new();
        let mut periods = Vec::new();
        for (period, counts) in [(T1, [12, 45, 0, 1]), (T2, [85, 6, 1, 1])] {
            for (cluster, &c) in counts.iter().enumerate() {
                for _ in 0..c {
                    labels.push(cluster as u32);
                    periods.push(period);
                }
            }
        }
        (labels, periods)
    }

    #[test]
    fn distribution_examples() {
        let d = cluster_distributions(&[0, 0, 1], &[T1, T1, T2]).unwrap();
        assert_eq!(d.p, [1.0, 0.0]);
        assert_eq!(d.q, [0.0, 1.0]);
        let d = cluster_distributions(&[3, 3, 3], &[T1, T2, T2]).unwrap();
        assert_eq!((d.p.as_slice(), d.q.as_slice()), (&[1.0][..], &[1.0][..]));
        let (labels, periods) = fig1();
        let d = cluster_distributions(&labels, &periods).unwrap();
        let expected_p: Vec<f64> = [12.0, 45.0, 0.0, 1.0].iter().map(|c| c / 58.0).collect();
        let expected_q: Vec<f64> = [85.0, 6.0, 1.0, 1.0].iter().map(|c| c / 93.0).collect();
        assert_eq!(d.p, expected_p);
        assert_eq!(d.q, expected_q);
        assert_eq!(
            cluster_distributions(&[0, 1], &[T1, T1]),
            Err(MeasureError::EmptyPeriod(T2))
        );
    }

    #[test]
    fn jsd_examples() {
        let same = ClusterDistribution {
            p: vec![0.3, 0.7],
            q: vec![0.3, 0.7],
        };
        assert_eq!(jsd(&same), 0.0);
        let disjoint = ClusterDistribution {
            p: vec![1.0, 0.0],
            q: vec![0.0, 1.0],
        };
        assert_eq!(jsd(&disjoint), 1.0);
        let (labels, periods) = fig1();
        let d = cluster_distributions(&labels, &periods).unwrap();
        assert!((jsd(&d) - 0.66).abs() <= 0.005, "{}", jsd(&d));
    }

    #[test]
    fn gold_change_examples() {
        let (labels, periods) = fig1();
        let gold: Vec<Option<u32>> = labels.into_iter().map(Some).collect();
        assert!((gold_graded_change(&gold, &periods).unwrap() - 0.66).abs() <= 0.005);
        let gold = [Some(0), Some(1), Some(0), Some(1)];
        assert_eq!(gold_graded_change(&gold, &[T1, T1, T2, T2]).unwrap(), 0.0);
        let gold = [Some(0), Some(0), Some(7), Some(7)];
        assert_eq!(gold_graded_change(&gold, &[T1, T1, T2, T2]).unwrap(), 1.0);
        assert_eq!(
            gold_graded_change(&[Some(0), None], &[T1, T2]),
            Err(MeasureError::MissingGold(1))
        );
    }

    #[test]
    fn apd_examples() {
        let v = vs(array![[1.0, 0.0], [1.0, 0.0]], vec![T1, T2]);
        assert_eq!(apd(&v, ApdMode::Exact).unwrap(), 0.0);
        let v = vs(array![[1.0, 0.0], [0.0, 1.0]], vec![T1, T2]);
        assert_eq!(apd(&v, ApdMode::Exact).unwrap(), 1.0);
        let v = vs(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], vec![T1, T1, T2]);
        let expected = 1.0 - 1.0 / 2f64.sqrt();
        assert!((apd(&v, ApdMode::Exact).unwrap() - expected).abs() < 1e-12);
        let v = vs(array![[1.0, 0.0]], vec![T1]);
        assert_eq!(apd(&v, ApdMode::Exact), Err(MeasureError::EmptyPeriod(T2)));
    }

    #[test]
    fn apd_sampled_is_reproducible() {
        let v = vs(
            Array2::from_shape_fn((9, 3), |(r, c)| ((r * 3 + c) as f64).sin() + 1.5),
            vec![T1, T1, T1, T1, T1, T2, T2, T2, T2],
        );
        let a = apd(&v, ApdMode::Sampled { seed: 4 }).unwrap();
        assert_eq!(a, apd(&v, ApdMode::Sampled { seed: 4 }).unwrap());
    }

    #[test]
    fn apd_within_examples() {
        let v = vs(array![[2.0, 1.0], [2.0, 1.0]], vec![T1, T1]);
        assert_eq!(apd_within(&v, T1, DEFAULT_MAX_PAIRS, 0).unwrap(), 0.0);
        let v = vs(array![[1.0, 0.0], [0.0, 1.0]], vec![T2, T2]);
        assert_eq!(apd_within(&v, T2, DEFAULT_MAX_PAIRS, 0).unwrap(), 1.0);
        let v = vs(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], vec![T1; 3]);
        let expected = (1.0 + 2.0 * (1.0 - 1.0 / 2f64.sqrt())) / 3.0;
        assert!((apd_within(&v, T1, DEFAULT_MAX_PAIRS, 0).unwrap() - expected).abs() < 1e-12);
        assert_eq!(
            apd_within(&v, T2, DEFAULT_MAX_PAIRS, 0),
            Err(MeasureError::TooFewUsages {
                period: T2,
                count: 0
            })
        );
    }

    #[test]
    fn nth_pair_enumerates_all_pairs() {
        let m = 6;
        let decoded: Vec<(usize, usize)> = (0..m * (m - 1) / 2).map(|p| nth_pair(p, m)).collect();
        let mut expected = Vec::new();
        for i in 0..m {
            for j in i + 1..m {
                expected.push((i, j));
            }
        }
        assert_eq!(decoded, expected);
    }

    #[test]
    fn apd_within_sampling_path() {
        let v = vs(
            Array2::from_shape_fn((30, 2), |(r, c)| if c == 0 { 1.0 } else { r as f64 / 10.0 }),
            vec![T1; 30],
        );
        let exact = apd_within(&v, T1, DEFAULT_MAX_PAIRS, 0).unwrap();
        let sampled = apd_within(&v, T1, 200, 9).unwrap();
        assert_eq!(sampled, apd_within(&v, T1, 200, 9).unwrap());
        assert!((exact - sampled).abs() < 0.05);
    }

    #[test]
    fn cos_change_examples() {
        let v = vs(array![[1.0, 2.0], [1.0, 2.0]], vec![T1, T2]);
        assert_eq!(cos_change(&v).unwrap(), 0.0);
        let v = vs(array![[1.0, 0.0], [0.0, 1.0]], vec![T1, T2]);
        assert_eq!(cos_change(&v).unwrap(), 1.0);
        let v = vs(array![[2.0, 0.0], [0.0, 2.0], [3.0, 0.0]], vec![T1, T1, T2]);
        let expected = 1.0 - 1.0 / 2f64.sqrt();
        assert!((cos_change(&v).unwrap() - expected).abs() < 1e-12);
        let v = vs(
            array![[1.0, 0.0], [-1.0, 0.0], [3.0, 0.0]],
            vec![T1, T1, T2],
        );
        assert_eq!(
            cos_change(&v),
            Err(MeasureError::Embedding(EmbeddingError::ZeroVector))
        );
    }

    #[test]
    fn measure_names() {
        for m in Measure::ALL {
            assert_eq!(m.as_str().parse::<Measure>(), Ok(m));
        }
        assert_eq!("APD-OLD".parse::<Measure>(), Ok(Measure::ApdOld));
    }

    fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("non-zero mass", |v| {
            let mut v = v;
            normalize(&mut v).map(|_| v)
        })
    }

    proptest! {
        #[test]
        fn jsd_symmetric_bounded(p in dist(5), q in dist(5)) {
            let pq = jsd(&ClusterDistribution { p: p.clone(), q: q.clone() });
            let qp = jsd(&ClusterDistribution { p: q.clone(), q: p.clone() });
            prop_assert!((pq - qp).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&pq));
            prop_assert_eq!(jsd(&ClusterDistribution { p: p.clone(), q: p }), 0.0);
        }

        #[test]
        fn cos_change_scale_invariant(s in 0.1f64..50.0, t in 0.1f64..50.0) {
            let rows = array![[1.0, 2.0], [0.5, -1.0], [2.0, 0.3], [0.1, 0.9]];
            let periods = vec![T1, T1, T2, T2];
            let base = cos_change(&vs(rows.clone(), periods.clone())).unwrap();
            let mut scaled = rows;
            scaled.row_mut(0).mapv_inplace(|x| x * s);
            scaled.row_mut(1).mapv_inplace(|x| x * s);
            scaled.row_mut(2).mapv_inplace(|x| x * t);
            scaled.row_mut(3).mapv_inplace(|x| x * t);
            prop_assert!((base - cos_change(&vs(scaled, periods)).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn apd_within_identical_vectors_is_zero(m in 2usize..40, max_pairs in 1usize..50, seed: u64) {
            let rows = Array2::from_shape_fn((m, 3), |(_, c)| c as f64 + 0.5);
            let v = vs(rows, vec![T1; m]);
            prop_assert!(apd_within(&v, T1, max_pairs, seed).unwrap().abs() < 1e-12);
        }

        #[test]
        fn apd_exact_permutation_invariant(seed in 0u64..200) {
            let rows = Array2::from_shape_fn((6, 3), |(r, c)| ((seed + 1) as f64 * (r + 2 * c + 1) as f64).cos() + 2.0);
            let periods = vec![T1, T2, T1, T2, T1, T2];
            let a = apd(&vs(rows.clone(), periods.clone()), ApdMode::Exact).unwrap();
            let order = [4, 3, 2, 5, 0, 1];
            let permuted = ndarray::Array2::from_shape_fn((6, 3), |(r, c)| rows[[order[r], c]]);
            let pp: Vec<Period> = order.iter().map(|&i| periods[i]).collect();
            let b = apd(&vs(permuted, pp), ApdMode::Exact).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
