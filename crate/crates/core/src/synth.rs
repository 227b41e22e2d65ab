//! Synthetic target bundles with known sense structure, change and form bias.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{write_bundle, BundleError, GoldRecord, Period, TargetBundle, Usage, Variant};
use crate::embedding::LayerStack;
use crate::measures::gold_graded_change;
use crate::seed::rng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("cannot parse synth spec: {0}")]
    Parse(#[from] toml::de::Error),
}

fn default_lemma() -> String {
    "synth".to_string()
}

fn default_layers() -> usize {
    12
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::Token]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default = "default_lemma")]
    pub lemma: String,
    pub n_per_period: usize,
    pub dim: usize,
    pub n_clusters: usize,
    /// Pairwise distance between cluster centers.
    pub cluster_separation: f64,
    pub noise_sigma: f64,
    /// Probability that a usage's form is its cluster's form rather than a random draw.
    pub form_bias: f64,
    /// Cluster probabilities in T1 and T2.
    pub period_cluster_weights: [Vec<f64>; 2],
    /// Form probabilities per period for forms not fixed by the cluster; uniform when absent.
    #[serde(default)]
    pub period_form_weights: Option<[Vec<f64>; 2]>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_layers")]
    pub layer_count: usize,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_true")]
    pub name_counts: bool,
}

impl SynthSpec {
    /// A spec with equal cluster weights in both periods and uniform forms.
    pub fn new(n_clusters: usize, n_per_period: usize, seed: u64) -> Self {
        let uniform = vec![1.0 / n_clusters as f64; n_clusters];
        Self {
            lemma: default_lemma(),
            n_per_period,
            dim: 8.max(n_clusters),
            n_clusters,
            cluster_separation: 20.0,
            noise_sigma: 1.0,
            form_bias: 0.0,
            period_cluster_weights: [uniform.clone(), uniform],
            period_form_weights: None,
            seed,
            layer_count: default_layers(),
            variants: default_variants(),
            name_counts: true,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidSpec(msg));
        if self.lemma.is_empty() {
            return bad("lemma is empty".into());
        }
        if self.n_clusters == 0 {
            return bad("n_clusters must be at least 1".into());
        }
        if self.n_per_period == 0 {
            return bad("n_per_period must be positive".into());
        }
        if self.dim < self.n_clusters {
            return bad(format!(
                "dim {} is smaller than n_clusters {}",
                self.dim, self.n_clusters
            ));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be positive".into());
        }
        if !(self.cluster_separation >= 0.0 && self.cluster_separation.is_finite()) {
            return bad("cluster_separation must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.form_bias) {
            return bad("form_bias must lie in [0, 1]".into());
        }
        if self.layer_count == 0 {
            return bad("layer_count must be positive".into());
        }
        if self.variants.is_empty() {
            return bad("at least one variant required".into());
        }
        check_weights(
            "period_cluster_weights",
            &self.period_cluster_weights,
            self.n_clusters,
        )?;
        if let Some(w) = &self.period_form_weights {
            check_weights("period_form_weights", w, self.n_clusters)?;
        }
        Ok(())
    }

    /// Surface form associated with cluster `c`.
    pub fn form(&self, c: usize) -> String {
        const SUFFIXES: [&str; 6] = ["", "s", "ed", "ing", "er", "est"];
        match SUFFIXES.get(c) {
            Some(s) => format!("{}{s}", self.lemma),
            None => format!("{}_{c}", self.lemma),
        }
    }
}

fn check_weights(name: &str, weights: &[Vec<f64>; 2], n: usize) -> Result<(), SynthError> {
    for (period, w) in weights.iter().enumerate() {
        if w.len() != n {
            return Err(SynthError::InvalidSpec(format!(
                "{name}[{period}] has {} entries, expected {n}",
                w.len()
            )));
        }
        if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(SynthError::InvalidSpec(format!(
                "{name}[{period}] has a negative entry"
            )));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SynthError::InvalidSpec(format!(
                "{name}[{period}] sums to {total}"
            )));
        }
    }
    Ok(())
}

/// `k` centers forming a regular simplex with all pairwise distances equal to `separation`,
/// randomly oriented in `dim` dimensions (`dim >= k`). The simplex centroid is the origin.
pub fn simplex_centers(k: usize, dim: usize, separation: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    assert!(dim >= k, "simplex needs dim >= k");
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Array1<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        for b in &basis {
            let proj = v.dot(b);
            v.scaled_add(-proj, b);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    let mut centers = Array2::zeros((k, dim));
    if k == 1 {
        return centers;
    }
    let mean = basis
        .iter()
        .fold(Array1::<f64>::zeros(dim), |acc, b| acc + b)
        / k as f64;
    let scale = separation / std::f64::consts::SQRT_2;
    for (i, b) in basis.iter().enumerate() {
        centers.row_mut(i).assign(&((b - &mean) * scale));
    }
    centers
}

fn to_f32_precision(v: f64) -> f64 {
    v as f32 as f64
}

/// Gaussian blobs with exactly `per_cluster` points each, in cluster order.
pub fn blobs(
    n_clusters: usize,
    per_cluster: usize,
    dim: usize,
    separation: f64,
    sigma: f64,
    seed: u64,
) -> (Array2<f64>, Vec<usize>) {
    let mut rng = rng(seed);
    let centers = simplex_centers(n_clusters, dim, separation, &mut rng);
    let n = n_clusters * per_cluster;
    let mut points = Array2::zeros((n, dim));
    let mut truth = Vec::with_capacity(n);
    for c in 0..n_clusters {
        for i in 0..per_cluster {
            let row = c * per_cluster + i;
            for d in 0..dim {
                points[[row, d]] = centers[[c, d]] + sigma * rng.sample::<f64, _>(StandardNormal);
            }
            truth.push(c);
        }
    }
    (points, truth)
}

/// Draws one synthetic target from `spec`.
///
/// Every layer of every variant carries the same vectors, so layer combination
/// is the identity on synthetic data.
pub fn generate_target(spec: &SynthSpec) -> Result<TargetBundle, SynthError> {
    spec.validate()?;
    let mut rng = rng(spec.seed);
    let centers = simplex_centers(spec.n_clusters, spec.dim, spec.cluster_separation, &mut rng);
    let uniform = vec![1.0; spec.n_clusters];
    let mut usages = Vec::with_capacity(2 * spec.n_per_period);
    let mut vectors = Vec::with_capacity(2 * spec.n_per_period * spec.dim);

    for (p, period) in [Period::T1, Period::T2].into_iter().enumerate() {
        let clusters = WeightedIndex::new(&spec.period_cluster_weights[p])
            .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        let form_weights = spec
            .period_form_weights
            .as_ref()
            .map_or(&uniform, |w| &w[p]);
        let forms =
            WeightedIndex::new(form_weights).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        for i in 0..spec.n_per_period {
            let cluster = clusters.sample(&mut rng);
            let form_index = if rng.random::<f64>() < spec.form_bias {
                cluster
            } else {
                forms.sample(&mut rng)
            };
            for d in 0..spec.dim {
                let noise: f64 = rng.sample(StandardNormal);
                vectors.push(to_f32_precision(
                    centers[[cluster, d]] + spec.noise_sigma * noise,
                ));
            }
            let len = rng.random_range(5..=20usize);
            let target_index = rng.random_range(0..len);
            let form = spec.form(form_index);
            let tokens = (0..len)
                .map(|t| {
                    if t == target_index {
                        form.clone()
                    } else {
                        format!("w{t}")
                    }
                })
                .collect();
            let name_count = spec.name_counts.then(|| rng.random_range(0..=3u32));
            usages.push(Usage {
                id: format!("{}-{period}-{i:04}", spec.lemma),
                lemma: spec.lemma.clone(),
                tokens,
                target_index,
                form,
                period,
                name_count,
                gold_cluster: Some(cluster as u32),
            });
        }
    }

    let matrix =
        Array2::from_shape_vec((usages.len(), spec.dim), vectors).expect("one vector per usage");
    let stack = LayerStack::new(vec![matrix; spec.layer_count])
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let stacks: BTreeMap<Variant, LayerStack> =
        spec.variants.iter().map(|&v| (v, stack.clone())).collect();

    let gold_labels: Vec<Option<u32>> = usages.iter().map(|u| u.gold_cluster).collect();
    let periods: Vec<Period> = usages.iter().map(|u| u.period).collect();
    let gold = GoldRecord {
        lemma: spec.lemma.clone(),
        graded_change: Some(
            gold_graded_change(&gold_labels, &periods).expect("both periods populated"),
        ),
        binary_change: None,
    };
    let note = format!("synthetic; ChaCha8 seed {}", spec.seed);
    Ok(TargetBundle::new(
        spec.lemma.clone(),
        usages,
        stacks,
        Some(gold),
        note,
    )?)
}

/// A set of synthetic targets, as read from TOML (`[[target]]` tables).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSuite {
    pub target: Vec<SynthSpec>,
}

impl SynthSuite {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        Ok(toml::from_str(text)?)
    }

    /// Generates every target into `out/<lemma>/`.
    pub fn write(&self, out: &Path) -> Result<Vec<PathBuf>, SynthError> {
        let mut dirs = Vec::with_capacity(self.target.len());
        for spec in &self.target {
            let bundle = generate_target(spec)?;
            let dir = out.join(&spec.lemma);
            write_bundle(&bundle, &dir)?;
            dirs.push(dir);
        }
        Ok(dirs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bias::{form_labels, gold_partition};
    use crate::stats::adjusted_rand_index;

    #[test]
    fn simplex_has_equal_sides() {
        let mut r = rng(1);
        for k in 1..=5 {
            let c = simplex_centers(k, 7, 10.0, &mut r);
            for i in 0..k {
                for j in i + 1..k {
                    let d = (&c.row(i) - &c.row(j)).mapv(|x| x * x).sum().sqrt();
                    assert!((d - 10.0).abs() < 1e-9, "k={k} d={d}");
                }
            }
            let centroid = c.sum_axis(ndarray::Axis(0));
            assert!(centroid.iter().all(|x| x.abs() < 1e-9));
        }
        let two = simplex_centers(2, 3, 6.0, &mut r);
        let radius = two.row(0).dot(&two.row(0)).sqrt();
        assert!((radius - 3.0).abs() < 1e-9);
    }

    #[test]
    fn full_form_bias_makes_forms_follow_gold() {
        let mut spec = SynthSpec::new(3, 40, 7);
        spec.form_bias = 1.0;
        let bundle = generate_target(&spec).unwrap();
        let forms = form_labels(&bundle.usages);
        let gold = gold_partition(&bundle.usages).unwrap();
        assert_eq!(adjusted_rand_index(&forms, &gold).unwrap(), 1.0);
    }

    #[test]
    fn equal_weights_give_small_change() {
        let spec = SynthSpec::new(3, 200, 11);
        let bundle = generate_target(&spec).unwrap();
        let g = bundle.gold.unwrap().graded_change.unwrap();
        assert!(g <= 0.1, "{g}");
    }

    #[test]
    fn disjoint_weights_give_full_change() {
        let mut spec = SynthSpec::new(2, 30, 3);
        spec.period_cluster_weights = [vec![1.0, 0.0], vec![0.0, 1.0]];
        let bundle = generate_target(&spec).unwrap();
        assert_eq!(bundle.gold.unwrap().graded_change, Some(1.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::new(2, 10, 5);
        assert_eq!(
            generate_target(&spec).unwrap(),
            generate_target(&spec).unwrap()
        );
        let other = SynthSpec::new(2, 10, 6);
        assert_ne!(
            generate_target(&spec).unwrap(),
            generate_target(&other).unwrap()
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SynthSpec::new(2, 10, 0);
        spec.noise_sigma = 0.0;
        assert!(matches!(
            generate_target(&spec),
            Err(SynthError::InvalidSpec(_))
        ));
        let mut spec = SynthSpec::new(2, 10, 0);
        spec.period_cluster_weights[1] = vec![0.7, 0.7];
        assert!(matches!(
            generate_target(&spec),
            Err(SynthError::InvalidSpec(_))
        ));
        let mut spec = SynthSpec::new(2, 10, 0);
        spec.n_clusters = 0;
        assert!(spec.validate().is_err());
        let mut spec = SynthSpec::new(3, 10, 0);
        spec.dim = 2;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn suite_parses_from_toml() {
        let text = r#"
            [[target]]
            lemma = "plane"
            n_per_period = 20
            dim = 4
            n_clusters = 2
            cluster_separation = 20.0
            noise_sigma = 1.0
            form_bias = 1.0
            period_cluster_weights = [[0.8, 0.2], [0.2, 0.8]]
            seed = 3
            variants = ["token", "toklem"]
        "#;
        let suite = SynthSuite::from_toml(text).unwrap();
        assert_eq!(suite.target.len(), 1);
        let spec = &suite.target[0];
        assert_eq!(spec.layer_count, 12);
        assert!(spec.name_counts);
        let bundle = generate_target(spec).unwrap();
        assert_eq!(bundle.variants(), [Variant::Token, Variant::TokLem]);
        assert_eq!(bundle.usages.len(), 40);
    }
}
