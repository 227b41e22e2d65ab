//! Cluster-bias audit.
//!
//! An inferred clustering is compared by ARI against partitions induced by
//! nuisance variables (target word form, sentence position, corpus, proper
//! names). Each influence score comes with two reference points:
//!
//! * the random baseline: the same comparison with the inferred labels shuffled;
//! * the actual baseline: the same comparison for the gold sense clustering.
//!
//! A variable whose influence beats both baselines is reflected by the
//! clustering more than chance or the annotation would explain.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ClusteringResult;
use crate::corpus::{Period, TargetBundle, Usage, Variant};
use crate::embedding::LayerSet;
use crate::seed::{derive_seed, rng};
use crate::stats::{adjusted_rand_index, Partition, StatsError};

pub const DEFAULT_RANDOM_ROUNDS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BiasError {
    #[error("name counts missing for usage {0}")]
    MissingNameCounts(usize),
    #[error("gold clusters missing for usage {0}")]
    MissingGold(usize),
    #[error("period {0} has no usages")]
    EmptyPeriod(Period),
    #[error("random baseline needs at least one round")]
    NoRounds,
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfluenceKind {
    Form,
    Position,
    Corpora,
    Names,
}

impl InfluenceKind {
    pub const ALL: [InfluenceKind; 4] = [
        InfluenceKind::Form,
        InfluenceKind::Position,
        InfluenceKind::Corpora,
        InfluenceKind::Names,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InfluenceKind::Form => "form",
            InfluenceKind::Position => "position",
            InfluenceKind::Corpora => "corpora",
            InfluenceKind::Names => "names",
        }
    }
}

impl fmt::Display for InfluenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceVariable {
    pub kind: InfluenceKind,
    pub labels: Partition,
}

/// Same surface form (case-sensitive) means same label.
pub fn form_labels(usages: &[Usage]) -> Partition {
    Partition::from_keys(usages.iter().map(|u| u.form.as_str()))
}

/// 0 when the target is among the first three tokens, 2 when among the last
/// three, else 1. The first test wins in short sentences.
pub fn position_labels(usages: &[Usage]) -> Partition {
    Partition::new(
        usages
            .iter()
            .map(|u| {
                if u.target_index <= 2 {
                    0
                } else if u.target_index + 3 >= u.tokens.len() {
                    2
                } else {
                    1
                }
            })
            .collect(),
    )
}

/// 0, 1, or 2+ proper names in the sentence.
pub fn name_labels(usages: &[Usage]) -> Result<Partition, BiasError> {
    usages
        .iter()
        .enumerate()
        .map(|(i, u)| {
            u.name_count
                .map(|c| c.min(2) as usize)
                .ok_or(BiasError::MissingNameCounts(i))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Partition::new)
}

pub fn corpus_labels(usages: &[Usage]) -> Partition {
    Partition::new(
        usages
            .iter()
            .map(|u| match u.period {
                Period::T1 => 0,
                Period::T2 => 1,
            })
            .collect(),
    )
}

pub fn gold_partition(usages: &[Usage]) -> Result<Partition, BiasError> {
    usages
        .iter()
        .enumerate()
        .map(|(i, u)| {
            u.gold_cluster
                .map(|g| g as usize)
                .ok_or(BiasError::MissingGold(i))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Partition::new)
}

pub fn influence_variable(
    kind: InfluenceKind,
    usages: &[Usage],
) -> Result<InfluenceVariable, BiasError> {
    let labels = match kind {
        InfluenceKind::Form => form_labels(usages),
        InfluenceKind::Position => position_labels(usages),
        InfluenceKind::Corpora => corpus_labels(usages),
        InfluenceKind::Names => name_labels(usages)?,
    };
    Ok(InfluenceVariable { kind, labels })
}

pub fn influence_score(
    inferred: &Partition,
    variable: &InfluenceVariable,
) -> Result<f64, BiasError> {
    Ok(adjusted_rand_index(inferred, &variable.labels)?)
}

/// Mean ARI between `variable` and `rounds` seeded shuffles of the inferred labels.
pub fn random_baseline(
    inferred: &Partition,
    variable: &InfluenceVariable,
    rounds: usize,
    seed: u64,
) -> Result<f64, BiasError> {
    if rounds == 0 {
        return Err(BiasError::NoRounds);
    }
    let mut rng = rng(seed);
    let mut labels = inferred.labels().to_vec();
    let mut total = 0.0;
    for _ in 0..rounds {
        labels.shuffle(&mut rng);
        total += adjusted_rand_index(&Partition::new(labels.clone()), &variable.labels)?;
    }
    Ok(total / rounds as f64)
}

pub fn actual_baseline(gold: &Partition, variable: &InfluenceVariable) -> Result<f64, BiasError> {
    Ok(adjusted_rand_index(gold, &variable.labels)?)
}

/// Share of cross-period usage pairs whose target forms differ.
pub fn form_change_score(usages: &[Usage]) -> Result<f64, BiasError> {
    let mut counts: HashMap<&str, (u64, u64)> = HashMap::new();
    let (mut n1, mut n2) = (0u64, 0u64);
    for u in usages {
        let entry = counts.entry(u.form.as_str()).or_default();
        match u.period {
            Period::T1 => {
                entry.0 += 1;
                n1 += 1;
            }
            Period::T2 => {
                entry.1 += 1;
                n2 += 1;
            }
        }
    }
    if n1 == 0 {
        return Err(BiasError::EmptyPeriod(Period::T1));
    }
    if n2 == 0 {
        return Err(BiasError::EmptyPeriod(Period::T2));
    }
    let same: u64 = counts.values().map(|(a, b)| a * b).sum();
    let total = n1 * n2;
    Ok((total - same) as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceScores {
    pub influence: f64,
    pub random_baseline: f64,
    pub actual_baseline: Option<f64>,
    pub above_random: bool,
    pub above_actual: Option<bool>,
    pub above_performance: Option<bool>,
}

impl InfluenceScores {
    pub fn new(
        influence: f64,
        random_baseline: f64,
        actual_baseline: Option<f64>,
        performance_ari: Option<f64>,
    ) -> Self {
        Self {
            influence,
            random_baseline,
            actual_baseline,
            above_random: influence > random_baseline,
            above_actual: actual_baseline.map(|b| influence > b),
            above_performance: performance_ari.map(|p| influence > p),
        }
    }

    /// Above the random baseline and, when known, the actual baseline.
    pub fn above_baselines(&self) -> bool {
        self.above_random && self.above_actual.unwrap_or(true)
    }
}

/// One variable's row; `scores` is `None` when the variable is unavailable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRow {
    pub variable: InfluenceKind,
    pub scores: Option<InfluenceScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub lemma: String,
    pub layer_set: LayerSet,
    pub variant: Variant,
    pub k: usize,
    /// ARI between inferred and gold clusters.
    pub performance_ari: Option<f64>,
    pub rows: Vec<InfluenceRow>,
}

impl BiasReport {
    pub fn row(&self, kind: InfluenceKind) -> Option<&InfluenceScores> {
        self.rows
            .iter()
            .find(|r| r.variable == kind)
            .and_then(|r| r.scores.as_ref())
    }
}

#[derive(Debug, Clone)]
pub struct AuditContext {
    pub layer_set: LayerSet,
    pub variant: Variant,
    pub random_rounds: usize,
    pub seed: u64,
}

/// Audits one clustering of `bundle` against every influence variable.
///
/// Variables that cannot be built (no name counts) get an empty row. Gold
/// comparisons are omitted when the bundle has no gold clusters.
pub fn audit_target(
    bundle: &TargetBundle,
    clustering: &ClusteringResult,
    ctx: &AuditContext,
) -> Result<BiasReport, BiasError> {
    let inferred = Partition::new(clustering.labels.clone());
    let gold = gold_partition(&bundle.usages).ok();
    let performance_ari = gold
        .as_ref()
        .map(|g| adjusted_rand_index(&inferred, g))
        .transpose()?;
    let layer_name = ctx.layer_set.to_string();
    let mut rows = Vec::with_capacity(InfluenceKind::ALL.len());
    for kind in InfluenceKind::ALL {
        let variable = match influence_variable(kind, &bundle.usages) {
            Ok(v) => v,
            Err(BiasError::MissingNameCounts(_)) => {
                rows.push(InfluenceRow {
                    variable: kind,
                    scores: None,
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let seed = derive_seed(
            ctx.seed,
            &[
                &bundle.lemma,
                ctx.variant.as_str(),
                &layer_name,
                kind.as_str(),
            ],
        );
        let influence = influence_score(&inferred, &variable)?;
        let random = random_baseline(&inferred, &variable, ctx.random_rounds, seed)?;
        let actual = gold
            .as_ref()
            .map(|g| actual_baseline(g, &variable))
            .transpose()?;
        rows.push(InfluenceRow {
            variable: kind,
            scores: Some(InfluenceScores::new(
                influence,
                random,
                actual,
                performance_ari,
            )),
        });
    }
    Ok(BiasReport {
        lemma: bundle.lemma.clone(),
        layer_set: ctx.layer_set.clone(),
        variant: ctx.variant,
        k: clustering.k,
        performance_ari,
        rows,
    })
}
