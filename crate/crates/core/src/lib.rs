//! Lexical semantic change detection from contextualized token vectors.
//!
//! The crate covers the measurement side of a change-detection study:
//!
//! * [`corpus`] loads and writes per-target bundles (usages, gold clusters,
//!   per-layer vectors for each pre-processing variant);
//! * [`embedding`] averages encoder layers and provides cosine primitives;
//! * [`clustering`] runs Ward agglomerative clustering and picks the number
//!   of clusters by silhouette;
//! * [`measures`] computes graded change (JSD over cluster distributions,
//!   APD, APD-OLD/NEW, COS);
//! * [`stats`] has the adjusted Rand index and Spearman's rho;
//! * [`bias`] audits clusterings for word form, position, name and corpus
//!   influence;
//! * [`synth`] generates bundles with known structure for validation;
//! * [`pipeline`] and [`report`] batch everything over a bundle directory.

pub mod bias;
pub mod clustering;
pub mod corpus;
pub mod embedding;
pub mod measures;
pub mod pipeline;
pub mod report;
pub mod seed;
pub mod stats;
pub mod synth;

pub use clustering::{select_k_and_cluster, ward_agglomerative, ClusteringResult, KRange};
pub use corpus::{load_bundle, write_bundle, Period, TargetBundle, Usage, Variant};
pub use embedding::{combine_layers, cosine_distance, LayerSet, LayerStack, VectorSet};
pub use measures::{ChangeScores, Measure};
pub use pipeline::RunConfig;
pub use stats::{adjusted_rand_index, spearman, Partition};
