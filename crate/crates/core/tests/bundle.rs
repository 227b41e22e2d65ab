use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde_json::Value;
use tempfile::TempDir;

use semshift::corpus::{
    encode_lsv, layer_file, load_bundle, sha256_hex, write_bundle, BundleError, GoldRecord, Period,
    TargetBundle, Usage, Variant,
};
use semshift::embedding::LayerStack;
use semshift::synth::{generate_target, SynthSpec, SynthSuite};

fn usage(id: &str, period: Period, gold: u32) -> Usage {
    Usage {
        id: id.into(),
        lemma: "plane".into(),
        tokens: vec!["the".into(), "planes".into(), "flew".into()],
        target_index: 1,
        form: "planes".into(),
        period,
        name_count: Some(0),
        gold_cluster: Some(gold),
    }
}

fn two_usage_bundle() -> TargetBundle {
    let usages = vec![usage("a", Period::T1, 0), usage("b", Period::T2, 1)];
    let layers = (0..12)
        .map(|l| Array2::from_shape_fn((2, 4), |(i, j)| (l * 8 + i * 4 + j) as f64 * 0.25))
        .collect();
    let stacks = BTreeMap::from([(Variant::Token, LayerStack::new(layers).unwrap())]);
    let gold = GoldRecord {
        lemma: "plane".into(),
        graded_change: Some(1.0),
        binary_change: Some(1),
    };
    TargetBundle::new("plane", usages, stacks, Some(gold), "fixture").unwrap()
}

/// Rewrites the manifest checksum of `rel` to match the file on disk.
fn reseal(dir: &Path, rel: &str) {
    let path = dir.join("manifest.json");
    let mut manifest: Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    let digest = sha256_hex(&fs::read(dir.join(rel)).unwrap());
    manifest["checksums"][rel] = Value::String(digest);
    fs::write(&path, serde_json::to_vec_pretty(&manifest).unwrap()).unwrap();
}

fn edit_manifest(dir: &Path, edit: impl FnOnce(&mut Value)) {
    let path = dir.join("manifest.json");
    let mut manifest: Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    edit(&mut manifest);
    fs::write(&path, serde_json::to_vec_pretty(&manifest).unwrap()).unwrap();
}

#[test]
fn round_trip_two_usages() {
    let dir = TempDir::new().unwrap();
    let bundle = two_usage_bundle();
    let manifest = write_bundle(&bundle, dir.path()).unwrap();
    assert_eq!(manifest.layer_count, 12);
    assert_eq!(manifest.vector_dim, 4);
    assert_eq!(manifest.checksums.len(), 13);
    let loaded = load_bundle(dir.path()).unwrap();
    assert_eq!(loaded.usages.len(), 2);
    assert_eq!(loaded, bundle);
    assert!(!loaded.degenerate());
}

#[test]
fn layer_with_extra_row_is_row_count_mismatch() {
    let dir = TempDir::new().unwrap();
    write_bundle(&two_usage_bundle(), dir.path()).unwrap();
    let rel = layer_file(Variant::Token, 3);
    fs::write(dir.path().join(&rel), encode_lsv(&Array2::zeros((3, 4)))).unwrap();
    reseal(dir.path(), &rel);
    match load_bundle(dir.path()) {
        Err(BundleError::RowCountMismatch {
            path,
            expected,
            found,
        }) => {
            assert!(path.ends_with(&rel));
            assert_eq!((expected, found), (2, 3));
        }
        other => panic!("expected RowCountMismatch, got {other:?}"),
    }
}

#[test]
fn flipped_byte_is_checksum_mismatch() {
    let dir = TempDir::new().unwrap();
    write_bundle(&two_usage_bundle(), dir.path()).unwrap();
    let rel = layer_file(Variant::Token, 7);
    let path = dir.path().join(&rel);
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    fs::write(&path, &bytes).unwrap();
    match load_bundle(dir.path()) {
        Err(BundleError::ChecksumMismatch { path, found, .. }) => {
            assert!(path.ends_with(&rel));
            assert_eq!(found, sha256_hex(&bytes));
        }
        other => panic!("expected ChecksumMismatch, got {other:?}"),
    }
}

#[test]
fn permuted_usages_are_detected() {
    let dir = TempDir::new().unwrap();
    write_bundle(&two_usage_bundle(), dir.path()).unwrap();
    let path = dir.path().join("usages.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.swap(0, 1);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    reseal(dir.path(), "usages.jsonl");
    match load_bundle(dir.path()) {
        Err(BundleError::AlignmentMismatch { row, .. }) => assert_eq!(row, 1),
        other => panic!("expected AlignmentMismatch, got {other:?}"),
    }
}

#[test]
fn missing_layer_file() {
    let dir = TempDir::new().unwrap();
    write_bundle(&two_usage_bundle(), dir.path()).unwrap();
    let rel = layer_file(Variant::Token, 12);
    fs::remove_file(dir.path().join(&rel)).unwrap();
    match load_bundle(dir.path()) {
        Err(BundleError::MissingFile { path }) => assert!(path.ends_with(&rel)),
        other => panic!("expected MissingFile, got {other:?}"),
    }
}

#[test]
fn malformed_usage_names_its_row() {
    let dir = TempDir::new().unwrap();
    write_bundle(&two_usage_bundle(), dir.path()).unwrap();
    let path = dir.path().join("usages.jsonl");
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("\"target_index\":1", "\"target_index\":3");
    fs::write(&path, text).unwrap();
    reseal(dir.path(), "usages.jsonl");
    match load_bundle(dir.path()) {
        Err(BundleError::MalformedRecord { row, reason, .. }) => {
            assert_eq!(row, Some(1));
            assert!(reason.contains("target_index out of range"), "{reason}");
        }
        other => panic!("expected MalformedRecord, got {other:?}"),
    }
}

#[test]
fn stated_gold_must_match_clusters() {
    let dir = TempDir::new().unwrap();
    write_bundle(&two_usage_bundle(), dir.path()).unwrap();
    edit_manifest(dir.path(), |m| {
        m["gold"]["graded_change"] = Value::from(0.5)
    });
    match load_bundle(dir.path()) {
        Err(BundleError::GoldMismatch {
            stated, recomputed, ..
        }) => {
            assert_eq!(stated, 0.5);
            assert!((recomputed - 1.0).abs() < 1e-12);
        }
        other => panic!("expected GoldMismatch, got {other:?}"),
    }
}

#[test]
fn single_period_bundle_loads_as_degenerate() {
    let dir = TempDir::new().unwrap();
    let usages = vec![usage("a", Period::T1, 0), usage("b", Period::T1, 1)];
    let stack = LayerStack::new(vec![Array2::ones((2, 3))]).unwrap();
    let bundle = TargetBundle::new(
        "plane",
        usages,
        BTreeMap::from([(Variant::Lemma, stack)]),
        None,
        "",
    )
    .unwrap();
    write_bundle(&bundle, dir.path()).unwrap();
    let loaded = load_bundle(dir.path()).unwrap();
    assert!(loaded.degenerate());
    assert_eq!(loaded.count(Period::T2), 0);
}

#[test]
fn synthetic_bundles_survive_round_trip() {
    let dir = TempDir::new().unwrap();
    let mut spec = SynthSpec::new(3, 20, 4);
    spec.variants = vec![Variant::Token, Variant::Lemma, Variant::TokLem];
    spec.layer_count = 4;
    let bundle = generate_target(&spec).unwrap();
    write_bundle(&bundle, dir.path()).unwrap();
    assert_eq!(load_bundle(dir.path()).unwrap(), bundle);
}

#[test]
fn suite_from_toml_writes_one_directory_per_target() {
    let dir = TempDir::new().unwrap();
    let suite = SynthSuite::from_toml(
        r#"
        [[target]]
        lemma = "alpha"
        n_per_period = 10
        dim = 4
        n_clusters = 2
        cluster_separation = 20.0
        noise_sigma = 1.0
        form_bias = 1.0
        period_cluster_weights = [[1.0, 0.0], [0.0, 1.0]]
        seed = 3

        [[target]]
        lemma = "beta"
        n_per_period = 10
        dim = 4
        n_clusters = 2
        cluster_separation = 20.0
        noise_sigma = 1.0
        form_bias = 0.0
        period_cluster_weights = [[0.5, 0.5], [0.5, 0.5]]
        name_counts = false
        "#,
    )
    .unwrap();
    let dirs = suite.write(dir.path()).unwrap();
    assert_eq!(dirs.len(), 2);
    let alpha = load_bundle(&dirs[0]).unwrap();
    assert_eq!(alpha.gold.unwrap().graded_change, Some(1.0));
    let beta = load_bundle(&dirs[1]).unwrap();
    assert!(beta.usages.iter().all(|u| u.name_count.is_none()));
}

#[test]
fn golden_fixture_from_independent_writer_loads() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden/plane");
    let bundle = load_bundle(&root).unwrap();
    assert_eq!(bundle.usages.len(), 3);
    assert_eq!(
        bundle.variants(),
        vec![Variant::Token, Variant::Lemma, Variant::TokLem]
    );
    assert_eq!(bundle.usages[1].form, "planes");
    assert_eq!(bundle.usages[1].name_count, Some(1));
    assert_eq!(bundle.count(Period::T2), 1);

    let set: semshift::LayerSet = "1+12".parse().unwrap();
    let lemma = semshift::combine_layers(
        bundle.stack(Variant::Lemma).unwrap(),
        &set,
        &bundle.periods(),
    )
    .unwrap();
    // Stored value = 100 * variant + layer + row / 2 + dim / 4.
    for ((row, d), v) in lemma.vectors.indexed_iter() {
        assert_eq!(*v, 100.0 + 6.5 + row as f64 * 0.5 + d as f64 * 0.25);
    }
    let gold = bundle.gold.as_ref().unwrap().graded_change.unwrap();
    let recomputed =
        semshift::measures::gold_graded_change(&[Some(0), Some(1), Some(1)], &bundle.periods())
            .unwrap();
    assert!((gold - recomputed).abs() < 1e-12);
}
