//! Target bundles: annotated usages plus per-variant layer stacks.
//!
//! On-disk layout, one directory per target lemma:
//!
//! ```text
//! <lemma>/
//!   manifest.json
//!   usages.jsonl
//!   vectors/<variant>/layer01.lsv ... layerNN.lsv
//! ```
//!
//! A `.lsv` file is the 4-byte magic `LSCV`, then `format_version`, `rows`
//! and `dim` as little-endian `u32`, then `rows * dim` little-endian binary32
//! values in row-major order.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::LayerStack;
use crate::measures;

pub const FORMAT_VERSION: u32 = 1;
pub const LSV_MAGIC: &[u8; 4] = b"LSCV";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const USAGES_FILE: &str = "usages.jsonl";

/// Tolerance between a stored graded change and the one recomputed from gold clusters.
pub const GOLD_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Period {
    T1,
    T2,
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Period::T1 => "t1",
            Period::T2 => "t2",
        })
    }
}

/// Pre-processing variant the encoder saw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Raw sentence.
    Token,
    /// Every token lemmatized.
    Lemma,
    /// Raw sentence with only the target replaced by its lemma.
    TokLem,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Token, Variant::Lemma, Variant::TokLem];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Token => "token",
            Variant::Lemma => "lemma",
            Variant::TokLem => "toklem",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "token" => Ok(Variant::Token),
            "lemma" => Ok(Variant::Lemma),
            "toklem" => Ok(Variant::TokLem),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

/// One occurrence of a target word.
///
/// `tokens` holds the raw (Token-variant) sentence, so `form` must equal
/// `tokens[target_index]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub id: String,
    pub lemma: String,
    pub tokens: Vec<String>,
    pub target_index: usize,
    pub form: String,
    pub period: Period,
    #[serde(default)]
    pub name_count: Option<u32>,
    #[serde(default)]
    pub gold_cluster: Option<u32>,
}

/// Returns one description per violated usage invariant; empty when valid.
pub fn validate_usage(u: &Usage) -> Vec<String> {
    let mut violations = Vec::new();
    if u.id.is_empty() {
        violations.push("id is empty".to_string());
    }
    match u.tokens.get(u.target_index) {
        None => violations.push("target_index out of range".to_string()),
        Some(token) if *token != u.form => violations.push("form mismatch".to_string()),
        Some(_) => {}
    }
    violations
}

/// Annotated change values for one lemma. `binary_change` is carried but never predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub lemma: String,
    #[serde(default)]
    pub graded_change: Option<f64>,
    #[serde(default)]
    pub binary_change: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub lemma: String,
    pub usage_count: usize,
    pub vector_dim: usize,
    pub layer_count: usize,
    pub variants: Vec<Variant>,
    /// Hex SHA-256 per bundle-relative path.
    pub checksums: BTreeMap<String, String>,
    /// Truncated SHA-256 of each usage id, in row order.
    pub usage_id_hashes: Vec<String>,
    #[serde(default)]
    pub rng_note: String,
    #[serde(default)]
    pub gold: Option<GoldRecord>,
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{path}: missing file")]
    MissingFile { path: PathBuf },
    #[error("{path}: checksum mismatch (manifest {expected}, file {found})")]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: {found} rows, expected {expected}")]
    RowCountMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}{}: {reason}", row.map(|r| format!(" row {r}")).unwrap_or_default())]
    MalformedRecord {
        path: PathBuf,
        row: Option<usize>,
        reason: String,
    },
    #[error("{path} row {row}: usage id does not match manifest row hash")]
    AlignmentMismatch { path: PathBuf, row: usize },
    #[error("{path}: stated graded change {stated} differs from gold clusters ({recomputed})")]
    GoldMismatch {
        path: PathBuf,
        stated: f64,
        recomputed: f64,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl BundleError {
    fn malformed(path: impl Into<PathBuf>, row: Option<usize>, reason: impl Into<String>) -> Self {
        BundleError::MalformedRecord {
            path: path.into(),
            row,
            reason: reason.into(),
        }
    }
}

/// Everything known about one target lemma.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBundle {
    pub lemma: String,
    pub usages: Vec<Usage>,
    pub stacks: BTreeMap<Variant, LayerStack>,
    pub gold: Option<GoldRecord>,
    pub rng_note: String,
}

impl TargetBundle {
    /// Builds a bundle, checking row alignment and usage invariants.
    pub fn new(
        lemma: impl Into<String>,
        usages: Vec<Usage>,
        stacks: BTreeMap<Variant, LayerStack>,
        gold: Option<GoldRecord>,
        rng_note: impl Into<String>,
    ) -> Result<Self, BundleError> {
        let bundle = Self {
            lemma: lemma.into(),
            usages,
            stacks,
            gold,
            rng_note: rng_note.into(),
        };
        bundle.check(Path::new(""))?;
        Ok(bundle)
    }

    fn check(&self, root: &Path) -> Result<(), BundleError> {
        let usages_path = root.join(USAGES_FILE);
        let mut seen = HashSet::new();
        for (row, usage) in self.usages.iter().enumerate() {
            let violations = validate_usage(usage);
            if !violations.is_empty() {
                return Err(BundleError::malformed(
                    &usages_path,
                    Some(row + 1),
                    violations.join("; "),
                ));
            }
            if usage.lemma != self.lemma {
                return Err(BundleError::malformed(
                    &usages_path,
                    Some(row + 1),
                    format!(
                        "lemma {:?} differs from bundle lemma {:?}",
                        usage.lemma, self.lemma
                    ),
                ));
            }
            if !seen.insert(usage.id.as_str()) {
                return Err(BundleError::malformed(
                    &usages_path,
                    Some(row + 1),
                    format!("duplicate usage id {:?}", usage.id),
                ));
            }
        }
        let mut shape = None;
        for (variant, stack) in &self.stacks {
            let path = root.join("vectors").join(variant.as_str());
            if stack.rows() != self.usages.len() {
                return Err(BundleError::RowCountMismatch {
                    path,
                    expected: self.usages.len(),
                    found: stack.rows(),
                });
            }
            let this = (stack.layer_count(), stack.dim());
            if *shape.get_or_insert(this) != this {
                return Err(BundleError::malformed(
                    path,
                    None,
                    "variants disagree on layer count or dimension",
                ));
            }
        }
        if self.stacks.is_empty() {
            return Err(BundleError::malformed(
                root.join(MANIFEST_FILE),
                None,
                "no variants",
            ));
        }
        if let Some(gold) = &self.gold {
            self.check_gold(gold, &root.join(MANIFEST_FILE))?;
        }
        Ok(())
    }

    fn check_gold(&self, gold: &GoldRecord, path: &Path) -> Result<(), BundleError> {
        let Some(stated) = gold.graded_change else {
            return Ok(());
        };
        if !(0.0..=1.0).contains(&stated) {
            return Err(BundleError::malformed(
                path,
                None,
                "graded_change outside [0, 1]",
            ));
        }
        if self.degenerate() {
            return Ok(());
        }
        if let Ok(recomputed) = measures::gold_graded_change(&self.gold_labels(), &self.periods()) {
            if (recomputed - stated).abs() > GOLD_TOLERANCE {
                return Err(BundleError::GoldMismatch {
                    path: path.to_path_buf(),
                    stated,
                    recomputed,
                });
            }
        }
        Ok(())
    }

    pub fn periods(&self) -> Vec<Period> {
        self.usages.iter().map(|u| u.period).collect()
    }

    pub fn gold_labels(&self) -> Vec<Option<u32>> {
        self.usages.iter().map(|u| u.gold_cluster).collect()
    }

    pub fn count(&self, period: Period) -> usize {
        self.usages.iter().filter(|u| u.period == period).count()
    }

    /// True when one of the periods has no usages. Change measures refuse such bundles.
    pub fn degenerate(&self) -> bool {
        self.count(Period::T1) == 0 || self.count(Period::T2) == 0
    }

    pub fn variants(&self) -> Vec<Variant> {
        self.stacks.keys().copied().collect()
    }

    pub fn stack(&self, variant: Variant) -> Option<&LayerStack> {
        self.stacks.get(&variant)
    }

    fn shape(&self) -> (usize, usize) {
        self.stacks
            .values()
            .next()
            .map(|s| (s.layer_count(), s.dim()))
            .unwrap_or((0, 0))
    }
}

pub fn layer_file(variant: Variant, layer: usize) -> String {
    format!("vectors/{}/layer{:02}.lsv", variant.as_str(), layer)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn usage_id_hash(id: &str) -> String {
    sha256_hex(id.as_bytes())[..16].to_string()
}

pub fn encode_lsv(matrix: &Array2<f64>) -> Vec<u8> {
    let (rows, dim) = matrix.dim();
    let mut out = Vec::with_capacity(16 + rows * dim * 4);
    out.extend_from_slice(LSV_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in matrix.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_lsv(bytes: &[u8]) -> Result<Array2<f64>, String> {
    if bytes.len() < 16 {
        return Err("truncated header".into());
    }
    if &bytes[..4] != LSV_MAGIC {
        return Err("bad magic".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let rows = word(8) as usize;
    let dim = word(12) as usize;
    let payload = &bytes[16..];
    if payload.len() != rows * dim * 4 {
        return Err(format!(
            "payload is {} bytes, header declares {rows}x{dim}",
            payload.len()
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((rows, dim), values).map_err(|e| e.to_string())
}

fn read_file(path: &Path) -> Result<Vec<u8>, BundleError> {
    fs::read(path).map_err(|source| match source.kind() {
        io::ErrorKind::NotFound => BundleError::MissingFile {
            path: path.to_path_buf(),
        },
        _ => BundleError::Io {
            path: path.to_path_buf(),
            source,
        },
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), BundleError> {
    let io_err = |source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

fn verified(
    root: &Path,
    rel: &str,
    manifest: &Manifest,
    consumed: &mut HashSet<String>,
) -> Result<Vec<u8>, BundleError> {
    let path = root.join(rel);
    let bytes = read_file(&path)?;
    let expected = manifest
        .checksums
        .get(rel)
        .ok_or_else(|| BundleError::malformed(&path, None, "file has no manifest checksum"))?;
    let found = sha256_hex(&bytes);
    if !found.eq_ignore_ascii_case(expected) {
        return Err(BundleError::ChecksumMismatch {
            path,
            expected: expected.clone(),
            found,
        });
    }
    consumed.insert(rel.to_string());
    Ok(bytes)
}

/// Loads and fully validates the bundle stored in `dir`.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<TargetBundle, BundleError> {
    let root = dir.as_ref();
    let manifest_path = root.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&read_file(&manifest_path)?)
        .map_err(|e| BundleError::malformed(&manifest_path, Some(e.line()), e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(BundleError::malformed(
            &manifest_path,
            None,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    if manifest.vector_dim == 0 || manifest.layer_count == 0 {
        return Err(BundleError::malformed(
            &manifest_path,
            None,
            "vector_dim and layer_count must be positive",
        ));
    }
    if manifest.variants.is_empty() {
        return Err(BundleError::malformed(
            &manifest_path,
            None,
            "no variants listed",
        ));
    }

    let mut consumed = HashSet::new();
    let usages_path = root.join(USAGES_FILE);
    let usages_bytes = verified(root, USAGES_FILE, &manifest, &mut consumed)?;
    let text = std::str::from_utf8(&usages_bytes)
        .map_err(|e| BundleError::malformed(&usages_path, None, e.to_string()))?;
    let mut usages = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let usage: Usage = serde_json::from_str(line)
            .map_err(|e| BundleError::malformed(&usages_path, Some(i + 1), e.to_string()))?;
        usages.push(usage);
    }
    if usages.len() != manifest.usage_count {
        return Err(BundleError::RowCountMismatch {
            path: usages_path,
            expected: manifest.usage_count,
            found: usages.len(),
        });
    }
    if manifest.usage_id_hashes.len() != usages.len() {
        return Err(BundleError::RowCountMismatch {
            path: manifest_path,
            expected: usages.len(),
            found: manifest.usage_id_hashes.len(),
        });
    }
    for (row, (usage, hash)) in usages.iter().zip(&manifest.usage_id_hashes).enumerate() {
        if usage_id_hash(&usage.id) != *hash {
            return Err(BundleError::AlignmentMismatch {
                path: usages_path,
                row: row + 1,
            });
        }
    }

    let mut stacks = BTreeMap::new();
    for &variant in &manifest.variants {
        let mut layers = Vec::with_capacity(manifest.layer_count);
        for layer in 1..=manifest.layer_count {
            let rel = layer_file(variant, layer);
            let path = root.join(&rel);
            let bytes = verified(root, &rel, &manifest, &mut consumed)?;
            let matrix = decode_lsv(&bytes).map_err(|e| BundleError::malformed(&path, None, e))?;
            if matrix.nrows() != usages.len() {
                return Err(BundleError::RowCountMismatch {
                    path,
                    expected: usages.len(),
                    found: matrix.nrows(),
                });
            }
            if matrix.ncols() != manifest.vector_dim {
                return Err(BundleError::malformed(
                    &path,
                    None,
                    format!(
                        "dim {} differs from manifest {}",
                        matrix.ncols(),
                        manifest.vector_dim
                    ),
                ));
            }
            if let Some(row) = matrix
                .rows()
                .into_iter()
                .position(|r| r.iter().any(|v| !v.is_finite()))
            {
                return Err(BundleError::malformed(
                    &path,
                    Some(row + 1),
                    "non-finite value",
                ));
            }
            layers.push(matrix);
        }
        let stack = LayerStack::new(layers).map_err(|e| {
            BundleError::malformed(
                root.join("vectors").join(variant.as_str()),
                None,
                e.to_string(),
            )
        })?;
        stacks.insert(variant, stack);
    }
    if let Some(extra) = manifest.checksums.keys().find(|k| !consumed.contains(*k)) {
        return Err(BundleError::MissingFile {
            path: root.join(extra),
        });
    }

    let bundle = TargetBundle {
        lemma: manifest.lemma.clone(),
        usages,
        stacks,
        gold: manifest.gold.clone(),
        rng_note: manifest.rng_note.clone(),
    };
    bundle.check(root)?;
    if bundle.degenerate() {
        log::warn!(
            "{}: one period has no usages; change measures will refuse it",
            root.display()
        );
    }
    Ok(bundle)
}

/// Writes `bundle` to `dir` in the standard layout, manifest last.
pub fn write_bundle(bundle: &TargetBundle, dir: impl AsRef<Path>) -> Result<Manifest, BundleError> {
    let root = dir.as_ref();
    bundle.check(root)?;
    let mut checksums = BTreeMap::new();

    let mut usages = String::new();
    for usage in &bundle.usages {
        let line = serde_json::to_string(usage).expect("usage serializes");
        usages.push_str(&line);
        usages.push('\n');
    }
    write_file(&root.join(USAGES_FILE), usages.as_bytes())?;
    checksums.insert(USAGES_FILE.to_string(), sha256_hex(usages.as_bytes()));

    for (&variant, stack) in &bundle.stacks {
        for (i, layer) in stack.layers().iter().enumerate() {
            let rel = layer_file(variant, i + 1);
            let bytes = encode_lsv(layer);
            write_file(&root.join(&rel), &bytes)?;
            checksums.insert(rel, sha256_hex(&bytes));
        }
    }

    let (layer_count, vector_dim) = bundle.shape();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        lemma: bundle.lemma.clone(),
        usage_count: bundle.usages.len(),
        vector_dim,
        layer_count,
        variants: bundle.variants(),
        checksums,
        usage_id_hashes: bundle.usages.iter().map(|u| usage_id_hash(&u.id)).collect(),
        rng_note: bundle.rng_note.clone(),
        gold: bundle.gold.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&root.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

/// Bundle directories under `root` (or `root` itself), sorted by path.
pub fn discover_bundles(root: impl AsRef<Path>) -> io::Result<Vec<PathBuf>> {
    let root = root.as_ref();
    if root.join(MANIFEST_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        if path.join(MANIFEST_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}
