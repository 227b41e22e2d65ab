//! Layer combination and vector-space primitives.
//!
//! Vectors are stored on disk as binary32 but every computation here runs in
//! binary64.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Period;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("layer {layer} out of range (stack has {available} layers)")]
    LayerOutOfRange { layer: usize, available: usize },
    #[error("layer set is empty")]
    EmptyLayerSet,
    #[error("invalid layer set {0:?}")]
    InvalidLayerSet(String),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("no rows match the selection")]
    EmptySelection,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("layer {layer} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        layer: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("non-finite value in layer {layer}, row {row}")]
    NonFinite { layer: usize, row: usize },
    #[error("layer stack has no layers")]
    NoLayers,
    #[error("{periods} period tags for {rows} rows")]
    PeriodCountMismatch { rows: usize, periods: usize },
}

/// Per-layer usage vectors for one pre-processing variant.
///
/// Layer `l` (1-based, as encoder layers are usually counted) is stored at
/// `layers[l - 1]`. Rows are usages in bundle order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    layers: Vec<Array2<f64>>,
}

impl LayerStack {
    pub fn new(layers: Vec<Array2<f64>>) -> Result<Self, EmbeddingError> {
        let first = layers.first().ok_or(EmbeddingError::NoLayers)?;
        let expected = first.dim();
        for (idx, layer) in layers.iter().enumerate() {
            if layer.dim() != expected {
                return Err(EmbeddingError::ShapeMismatch {
                    layer: idx + 1,
                    expected,
                    found: layer.dim(),
                });
            }
            for (row, values) in layer.axis_iter(Axis(0)).enumerate() {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(EmbeddingError::NonFinite {
                        layer: idx + 1,
                        row,
                    });
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn rows(&self) -> usize {
        self.layers[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].ncols()
    }

    /// Matrix for 1-based layer index `layer`.
    pub fn layer(&self, layer: usize) -> Option<&Array2<f64>> {
        layer.checked_sub(1).and_then(|i| self.layers.get(i))
    }

    pub fn layers(&self) -> &[Array2<f64>] {
        &self.layers
    }
}

/// A non-empty set of 1-based layer indices, kept sorted and deduplicated.
///
/// Parses from `+`-joined items where each item is a layer or an inclusive
/// range: `12`, `1+12`, `9-12`, `1-4+12`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerSet(Vec<usize>);

impl LayerSet {
    pub fn new(layers: impl IntoIterator<Item = usize>) -> Result<Self, EmbeddingError> {
        let mut layers: Vec<usize> = layers.into_iter().collect();
        layers.sort_unstable();
        layers.dedup();
        if layers.is_empty() {
            return Err(EmbeddingError::EmptyLayerSet);
        }
        if layers[0] == 0 {
            return Err(EmbeddingError::LayerOutOfRange {
                layer: 0,
                available: 0,
            });
        }
        Ok(Self(layers))
    }

    pub fn single(layer: usize) -> Result<Self, EmbeddingError> {
        Self::new([layer])
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn max_layer(&self) -> usize {
        *self.0.last().expect("layer set is non-empty")
    }

    /// The sweep used for 12-layer encoders: 1, 12, 1+12, 1-4, 9-12.
    pub fn standard_sweep() -> Vec<LayerSet> {
        ["1", "12", "1+12", "1-4", "9-12"]
            .iter()
            .map(|s| s.parse().expect("static layer set"))
            .collect()
    }
}

impl fmt::Display for LayerSet {
    // Runs of three or more consecutive layers print as ranges.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        let mut i = 0;
        while i < self.0.len() {
            let mut j = i;
            while j + 1 < self.0.len() && self.0[j + 1] == self.0[j] + 1 {
                j += 1;
            }
            if j - i >= 2 {
                parts.push(format!("{}-{}", self.0[i], self.0[j]));
            } else {
                parts.extend(self.0[i..=j].iter().map(|l| l.to_string()));
            }
            i = j + 1;
        }
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for LayerSet {
    type Err = EmbeddingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EmbeddingError::InvalidLayerSet(s.to_string());
        let mut layers = Vec::new();
        for item in s.trim().split('+') {
            let item = item.trim();
            if let Some((lo, hi)) = item.split_once('-') {
                let lo: usize = lo.trim().parse().map_err(|_| bad())?;
                let hi: usize = hi.trim().parse().map_err(|_| bad())?;
                if lo > hi {
                    return Err(bad());
                }
                layers.extend(lo..=hi);
            } else {
                layers.push(item.parse().map_err(|_| bad())?);
            }
        }
        Self::new(layers)
    }
}

impl Serialize for LayerSet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerSet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Usage vectors after layer combination, tagged with their period.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSet {
    pub vectors: Array2<f64>,
    pub periods: Vec<Period>,
    pub layer_set: LayerSet,
}

impl VectorSet {
    pub fn new(
        vectors: Array2<f64>,
        periods: Vec<Period>,
        layer_set: LayerSet,
    ) -> Result<Self, EmbeddingError> {
        if vectors.nrows() != periods.len() {
            return Err(EmbeddingError::PeriodCountMismatch {
                rows: vectors.nrows(),
                periods: periods.len(),
            });
        }
        Ok(Self {
            vectors,
            periods,
            layer_set,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row indices belonging to `period`, in bundle order.
    pub fn indices(&self, period: Period) -> Vec<usize> {
        self.periods
            .iter()
            .enumerate()
            .filter(|(_, p)| **p == period)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Averages the selected layers row by row.
pub fn combine_layers(
    stack: &LayerStack,
    layer_set: &LayerSet,
    periods: &[Period],
) -> Result<VectorSet, EmbeddingError> {
    let available = stack.layer_count();
    let mut sum = Array2::<f64>::zeros((stack.rows(), stack.dim()));
    for &layer in layer_set.layers() {
        let matrix = stack
            .layer(layer)
            .ok_or(EmbeddingError::LayerOutOfRange { layer, available })?;
        sum += matrix;
    }
    if layer_set.layers().len() > 1 {
        sum /= layer_set.layers().len() as f64;
    }
    VectorSet::new(sum, periods.to_vec(), layer_set.clone())
}

/// `1 - cos(x, y)`, clamped to `[0, 2]`.
pub fn cosine_distance(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64, EmbeddingError> {
    if x.len() != y.len() {
        return Err(EmbeddingError::DimensionMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let xx = x.dot(&x);
    let yy = y.dot(&y);
    if xx == 0.0 || yy == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    let cos = x.dot(&y) / (xx * yy).sqrt();
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

/// Mean of the rows in `period`, or of all rows when `period` is `None`.
pub fn mean_vector(vs: &VectorSet, period: Option<Period>) -> Result<Array1<f64>, EmbeddingError> {
    let mut sum = Array1::<f64>::zeros(vs.vectors.ncols());
    let mut count = 0usize;
    for (row, p) in vs.vectors.axis_iter(Axis(0)).zip(&vs.periods) {
        if period.is_none_or(|want| want == *p) {
            sum += &row;
            count += 1;
        }
    }
    if count == 0 {
        return Err(EmbeddingError::EmptySelection);
    }
    Ok(sum / count as f64)
}
