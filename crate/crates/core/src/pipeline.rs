//! Batch orchestration over a directory of target bundles.
//!
//! Each bundle is an independent job. Jobs run on a rayon pool and results
//! are re-ordered by lemma, so outputs do not depend on completion order or
//! the number of workers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bias::{
    audit_target, form_change_score, AuditContext, BiasReport, DEFAULT_RANDOM_ROUNDS,
};
use crate::clustering::{select_k_and_cluster, ClusteringResult, KRange};
use crate::corpus::{discover_bundles, load_bundle, Period, TargetBundle, Variant};
use crate::embedding::{combine_layers, LayerSet, VectorSet};
use crate::measures::{
    apd, apd_within, cluster_distributions, cos_change, jsd, ApdMode, ChangeScores, Measure,
    MeasureError, DEFAULT_MAX_PAIRS,
};
use crate::seed::derive_seed;
use crate::stats::spearman;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no bundles found under {0}")]
    NoBundles(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("need at least 3 targets with prediction and gold, got {0}")]
    TooFewTargets(usize),
    #[error("{path} line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApdModeKind {
    #[default]
    Exact,
    Sampled,
}

/// Which labels feed the JSD measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    #[default]
    Inferred,
    Gold,
}

fn default_layer_sets() -> Vec<LayerSet> {
    LayerSet::standard_sweep()
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::Token]
}

fn default_measures() -> Vec<Measure> {
    Measure::ALL.to_vec()
}

fn default_max_pairs() -> usize {
    DEFAULT_MAX_PAIRS
}

fn default_rounds() -> usize {
    DEFAULT_RANDOM_ROUNDS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub bundle_root: PathBuf,
    #[serde(default = "default_layer_sets")]
    pub layer_sets: Vec<LayerSet>,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_measures")]
    pub measures: Vec<Measure>,
    #[serde(default)]
    pub apd_mode: ApdModeKind,
    #[serde(default)]
    pub jsd_labels: LabelSource,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; `None` lets rayon decide.
    #[serde(default)]
    pub jobs: Option<usize>,
    #[serde(default)]
    pub k_range: KRange,
    #[serde(default = "default_max_pairs")]
    pub max_pairs: usize,
    #[serde(default = "default_rounds")]
    pub random_rounds: usize,
}

impl RunConfig {
    pub fn new(bundle_root: impl Into<PathBuf>) -> Self {
        Self {
            bundle_root: bundle_root.into(),
            layer_sets: default_layer_sets(),
            variants: default_variants(),
            measures: default_measures(),
            apd_mode: ApdModeKind::default(),
            jsd_labels: LabelSource::default(),
            seed: 0,
            jobs: None,
            k_range: KRange::default(),
            max_pairs: DEFAULT_MAX_PAIRS,
            random_rounds: DEFAULT_RANDOM_ROUNDS,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.layer_sets.is_empty() {
            return bad("no layer sets");
        }
        if self.variants.is_empty() {
            return bad("no variants");
        }
        if self.measures.is_empty() {
            return bad("no measures");
        }
        if self.max_pairs == 0 {
            return bad("max_pairs must be positive");
        }
        if self.random_rounds == 0 {
            return bad("random_rounds must be positive");
        }
        if self.jobs == Some(0) {
            return bad("jobs must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleFailure {
    pub bundle: String,
    pub error: String,
}

/// Per-bundle outputs plus the bundles that could not be processed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput<T> {
    pub items: Vec<T>,
    pub failures: Vec<BundleFailure>,
    pub warnings: Vec<String>,
}

impl<T> RunOutput<T> {
    pub fn partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

struct JobOutput<T> {
    lemma: String,
    items: Vec<T>,
    warnings: Vec<String>,
}

fn run_jobs<T, F>(config: &RunConfig, job: F) -> Result<RunOutput<T>, PipelineError>
where
    T: Send,
    F: Fn(&TargetBundle) -> Result<JobOutput<T>, String> + Sync,
{
    config.validate()?;
    let paths = discover_bundles(&config.bundle_root).map_err(|source| PipelineError::Io {
        path: config.bundle_root.clone(),
        source,
    })?;
    if paths.is_empty() {
        return Err(PipelineError::NoBundles(config.bundle_root.clone()));
    }
    let work = |path: &PathBuf| -> Result<JobOutput<T>, BundleFailure> {
        let fail = |error: String| BundleFailure {
            bundle: path.display().to_string(),
            error,
        };
        let bundle = load_bundle(path).map_err(|e| fail(e.to_string()))?;
        check_request(&bundle, config).map_err(fail)?;
        job(&bundle).map_err(fail)
    };
    let results: Vec<Result<JobOutput<T>, BundleFailure>> = match config.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?
            .install(|| paths.par_iter().map(work).collect()),
        None => paths.par_iter().map(work).collect(),
    };

    let mut done = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(out) => done.push(out),
            Err(f) => failures.push(f),
        }
    }
    done.sort_by(|a, b| a.lemma.cmp(&b.lemma));
    let mut output = RunOutput {
        items: Vec::new(),
        failures,
        warnings: Vec::new(),
    };
    for job in done {
        output.items.extend(job.items);
        output.warnings.extend(job.warnings);
    }
    Ok(output)
}

fn check_request(bundle: &TargetBundle, config: &RunConfig) -> Result<(), String> {
    for variant in &config.variants {
        let stack = bundle
            .stack(*variant)
            .ok_or_else(|| format!("variant {variant} absent from bundle {}", bundle.lemma))?;
        for set in &config.layer_sets {
            if set.max_layer() > stack.layer_count() {
                return Err(format!(
                    "layer set {set} needs layer {} but bundle {} has {}",
                    set.max_layer(),
                    bundle.lemma,
                    stack.layer_count()
                ));
            }
        }
    }
    Ok(())
}

fn vectors(bundle: &TargetBundle, variant: Variant, set: &LayerSet) -> Result<VectorSet, String> {
    let stack = bundle
        .stack(variant)
        .ok_or_else(|| format!("variant {variant} absent"))?;
    combine_layers(stack, set, &bundle.periods()).map_err(|e| e.to_string())
}

/// One clustering per bundle, variant and layer set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub lemma: String,
    pub variant: Variant,
    pub layer_set: LayerSet,
    pub result: ClusteringResult,
}

pub fn run_cluster(config: &RunConfig) -> Result<RunOutput<ClusterRecord>, PipelineError> {
    run_jobs(config, |bundle| {
        let mut items = Vec::new();
        let mut warnings = Vec::new();
        for &variant in &config.variants {
            for set in &config.layer_sets {
                let vs = vectors(bundle, variant, set)?;
                match select_k_and_cluster(vs.vectors.view(), config.k_range) {
                    Ok(result) => items.push(ClusterRecord {
                        lemma: bundle.lemma.clone(),
                        variant,
                        layer_set: set.clone(),
                        result,
                    }),
                    Err(e) => warnings.push(format!(
                        "{} {variant} {set}: unclusterable: {e}",
                        bundle.lemma
                    )),
                }
            }
        }
        Ok(JobOutput {
            lemma: bundle.lemma.clone(),
            items,
            warnings,
        })
    })
}

fn score_one(
    bundle: &TargetBundle,
    vs: &VectorSet,
    measure: Measure,
    config: &RunConfig,
    seed: u64,
) -> Result<f64, String> {
    let sub_seed = derive_seed(seed, &[measure.as_str()]);
    let err = |e: MeasureError| e.to_string();
    match measure {
        Measure::Jsd => {
            let labels: Vec<usize> = match config.jsd_labels {
                LabelSource::Gold => bundle
                    .usages
                    .iter()
                    .enumerate()
                    .map(|(i, u)| {
                        u.gold_cluster
                            .map(|g| g as usize)
                            .ok_or(MeasureError::MissingGold(i))
                    })
                    .collect::<Result<_, _>>()
                    .map_err(err)?,
                LabelSource::Inferred => {
                    select_k_and_cluster(vs.vectors.view(), config.k_range)
                        .map_err(|e| format!("unclusterable: {e}"))?
                        .labels
                }
            };
            Ok(jsd(
                &cluster_distributions(&labels, &vs.periods).map_err(err)?
            ))
        }
        Measure::Apd => {
            let mode = match config.apd_mode {
                ApdModeKind::Exact => ApdMode::Exact,
                ApdModeKind::Sampled => ApdMode::Sampled { seed: sub_seed },
            };
            apd(vs, mode).map_err(err)
        }
        Measure::ApdOld => apd_within(vs, Period::T1, config.max_pairs, sub_seed).map_err(err),
        Measure::ApdNew => apd_within(vs, Period::T2, config.max_pairs, sub_seed).map_err(err),
        Measure::Cos => cos_change(vs).map_err(err),
    }
}

/// Change scores for every lemma x layer set x variant.
pub fn run_measure(config: &RunConfig) -> Result<RunOutput<ChangeScores>, PipelineError> {
    run_jobs(config, |bundle| {
        if bundle.degenerate() {
            let empty = if bundle.count(Period::T1) == 0 {
                Period::T1
            } else {
                Period::T2
            };
            return Err(format!(
                "degenerate bundle {}: period {empty} is empty",
                bundle.lemma
            ));
        }
        let mut items = Vec::new();
        let mut warnings = Vec::new();
        for &variant in &config.variants {
            for set in &config.layer_sets {
                let vs = vectors(bundle, variant, set)?;
                let layer_name = set.to_string();
                let seed =
                    derive_seed(config.seed, &[&bundle.lemma, variant.as_str(), &layer_name]);
                let mut scores = ChangeScores {
                    lemma: bundle.lemma.clone(),
                    layer_set: set.clone(),
                    variant,
                    jsd: None,
                    apd: None,
                    apd_old: None,
                    apd_new: None,
                    cos: None,
                    seed,
                };
                for &measure in &config.measures {
                    match score_one(bundle, &vs, measure, config, seed) {
                        Ok(v) => scores.set(measure, v),
                        Err(e) => warnings
                            .push(format!("{} {variant} {set} {measure}: {e}", bundle.lemma)),
                    }
                }
                items.push(scores);
            }
        }
        Ok(JobOutput {
            lemma: bundle.lemma.clone(),
            items,
            warnings,
        })
    })
}

/// Influence audits for every lemma x layer set x variant.
pub fn run_audit(config: &RunConfig) -> Result<RunOutput<BiasReport>, PipelineError> {
    run_jobs(config, |bundle| {
        let mut items = Vec::new();
        let mut warnings = Vec::new();
        for &variant in &config.variants {
            for set in &config.layer_sets {
                let vs = vectors(bundle, variant, set)?;
                let clustering = match select_k_and_cluster(vs.vectors.view(), config.k_range) {
                    Ok(c) => c,
                    Err(e) => {
                        warnings.push(format!(
                            "{} {variant} {set}: unclusterable: {e}",
                            bundle.lemma
                        ));
                        continue;
                    }
                };
                let ctx = AuditContext {
                    layer_set: set.clone(),
                    variant,
                    random_rounds: config.random_rounds,
                    seed: config.seed,
                };
                items.push(audit_target(bundle, &clustering, &ctx).map_err(|e| e.to_string())?);
            }
        }
        Ok(JobOutput {
            lemma: bundle.lemma.clone(),
            items,
            warnings,
        })
    })
}

/// Per-lemma reference values used by evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetFacts {
    pub lemma: String,
    pub graded_change: Option<f64>,
    pub form_change: Option<f64>,
}

pub fn collect_facts(config: &RunConfig) -> Result<RunOutput<TargetFacts>, PipelineError> {
    let paths = discover_bundles(&config.bundle_root).map_err(|source| PipelineError::Io {
        path: config.bundle_root.clone(),
        source,
    })?;
    if paths.is_empty() {
        return Err(PipelineError::NoBundles(config.bundle_root.clone()));
    }
    let mut output = RunOutput {
        items: Vec::new(),
        failures: Vec::new(),
        warnings: Vec::new(),
    };
    for path in paths {
        match load_bundle(&path) {
            Ok(bundle) => output.items.push(TargetFacts {
                graded_change: bundle.gold.as_ref().and_then(|g| g.graded_change),
                form_change: form_change_score(&bundle.usages).ok(),
                lemma: bundle.lemma,
            }),
            Err(e) => output.failures.push(BundleFailure {
                bundle: path.display().to_string(),
                error: e.to_string(),
            }),
        }
    }
    output.items.sort_by(|a, b| a.lemma.cmp(&b.lemma));
    Ok(output)
}

/// Rank correlation of one measure's predictions against a per-lemma reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub layer_set: LayerSet,
    pub variant: Variant,
    pub measure: Measure,
    pub n: usize,
    pub rho: Option<f64>,
}

type GroupKey = (LayerSet, Variant, Measure);

fn correlate(scores: &[ChangeScores], reference: &BTreeMap<String, f64>) -> Vec<EvalRow> {
    let mut groups: Vec<(GroupKey, Vec<(f64, f64)>)> = Vec::new();
    for s in scores {
        for measure in Measure::ALL {
            let Some(pred) = s.get(measure) else { continue };
            let key = (s.layer_set.clone(), s.variant, measure);
            let slot = match groups.iter().position(|(k, _)| *k == key) {
                Some(i) => i,
                None => {
                    groups.push((key, Vec::new()));
                    groups.len() - 1
                }
            };
            if let Some(&truth) = reference.get(&s.lemma) {
                groups[slot].1.push((pred, truth));
            }
        }
    }
    groups
        .into_iter()
        .map(|((layer_set, variant, measure), pairs)| {
            let (preds, truths): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            EvalRow {
                layer_set,
                variant,
                measure,
                n: pairs.len(),
                rho: spearman(&preds, &truths).ok(),
            }
        })
        .collect()
}

/// Spearman's rho between predictions and gold graded change, per layer set x variant x measure.
pub fn run_eval(
    scores: &[ChangeScores],
    gold: &BTreeMap<String, f64>,
) -> Result<Vec<EvalRow>, PipelineError> {
    let usable = scores
        .iter()
        .filter(|s| gold.contains_key(&s.lemma))
        .map(|s| s.lemma.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if usable < 3 {
        return Err(PipelineError::TooFewTargets(usable));
    }
    Ok(correlate(scores, gold))
}

/// Spearman's rho between the cross-period form mismatch rate and each measure's predictions.
pub fn run_form_correlation(
    scores: &[ChangeScores],
    form_change: &BTreeMap<String, f64>,
) -> Result<Vec<EvalRow>, PipelineError> {
    let usable = scores
        .iter()
        .filter(|s| form_change.contains_key(&s.lemma))
        .map(|s| s.lemma.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if usable < 3 {
        return Err(PipelineError::TooFewTargets(usable));
    }
    Ok(correlate(scores, form_change))
}

pub fn gold_map(facts: &[TargetFacts]) -> BTreeMap<String, f64> {
    facts
        .iter()
        .filter_map(|f| f.graded_change.map(|g| (f.lemma.clone(), g)))
        .collect()
}

pub fn form_map(facts: &[TargetFacts]) -> BTreeMap<String, f64> {
    facts
        .iter()
        .filter_map(|f| f.form_change.map(|g| (f.lemma.clone(), g)))
        .collect()
}

pub(crate) fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> PipelineError {
    PipelineError::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}
