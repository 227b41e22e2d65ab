//! TSV, JSON and Markdown renderings of pipeline results.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so TSV
//! files parse back to the exact values. Missing values are written as `–`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::bias::{BiasReport, InfluenceKind, InfluenceRow, InfluenceScores};
use crate::corpus::Variant;
use crate::embedding::LayerSet;
use crate::measures::{ChangeScores, Measure};
use crate::pipeline::{parse_err, BundleFailure, ClusterRecord, EvalRow, PipelineError};

pub const MISSING: &str = "–";

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |x| x.to_string())
}

fn flag(v: Option<bool>) -> String {
    v.map_or_else(|| MISSING.to_string(), |b| b.to_string())
}

fn parse_num(path: &Path, line: usize, s: &str) -> Result<Option<f64>, PipelineError> {
    if s == MISSING {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| parse_err(path, line, format!("bad number {s:?}")))
}

fn parse_flag(path: &Path, line: usize, s: &str) -> Result<Option<bool>, PipelineError> {
    match s {
        "true" => Ok(Some(true)),
        "false" => Ok(Some(false)),
        _ if s == MISSING => Ok(None),
        _ => Err(parse_err(path, line, format!("bad flag {s:?}"))),
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report values serialize");
    s.push('\n');
    s
}

const SCORES_HEADER: &str = "lemma\tlayer_set\tvariant\tmeasure\tvalue\tseed";

/// One row per lemma x layer set x variant x measure.
pub fn scores_tsv(scores: &[ChangeScores], measures: &[Measure]) -> String {
    let mut out = String::from(SCORES_HEADER);
    out.push('\n');
    for s in scores {
        for &m in measures {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                s.lemma,
                s.layer_set,
                s.variant,
                m,
                num(s.get(m)),
                s.seed
            )
            .unwrap();
        }
    }
    out
}

pub fn parse_scores_tsv(path: &Path, text: &str) -> Result<Vec<ChangeScores>, PipelineError> {
    let mut rows: Vec<ChangeScores> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if i == 0 {
            if line != SCORES_HEADER {
                return Err(parse_err(path, lineno, "unexpected header"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(parse_err(
                path,
                lineno,
                format!("{} columns, expected 6", cols.len()),
            ));
        }
        let layer_set: LayerSet = cols[1]
            .parse()
            .map_err(|e| parse_err(path, lineno, format!("{e}")))?;
        let variant: Variant = cols[2]
            .parse()
            .map_err(|e: String| parse_err(path, lineno, e))?;
        let measure: Measure = cols[3]
            .parse()
            .map_err(|e: String| parse_err(path, lineno, e))?;
        let value = parse_num(path, lineno, cols[4])?;
        let seed: u64 = cols[5]
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad seed"))?;
        let existing = rows
            .iter_mut()
            .find(|r| r.lemma == cols[0] && r.layer_set == layer_set && r.variant == variant);
        let row = match existing {
            Some(r) => r,
            None => {
                rows.push(ChangeScores {
                    lemma: cols[0].to_string(),
                    layer_set,
                    variant,
                    jsd: None,
                    apd: None,
                    apd_old: None,
                    apd_new: None,
                    cos: None,
                    seed,
                });
                rows.last_mut().unwrap()
            }
        };
        if let Some(v) = value {
            row.set(measure, v);
        }
    }
    Ok(rows)
}

pub fn eval_tsv(rows: &[EvalRow]) -> String {
    let mut out = String::from("layer_set\tvariant\tmeasure\tn\trho\n");
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.layer_set,
            r.variant,
            r.measure,
            r.n,
            num(r.rho)
        )
        .unwrap();
    }
    out
}

pub fn clusters_tsv(records: &[ClusterRecord]) -> String {
    let mut out = String::from("lemma\tvariant\tlayer_set\tk\tsilhouette\tlabels\n");
    for r in records {
        let labels: Vec<String> = r.result.labels.iter().map(|l| l.to_string()).collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.lemma,
            r.variant,
            r.layer_set,
            r.result.k,
            r.result.silhouette(),
            labels.join(",")
        )
        .unwrap();
    }
    out
}

pub fn failures_tsv(failures: &[BundleFailure]) -> String {
    let mut out = String::from("bundle\terror\n");
    for f in failures {
        writeln!(out, "{}\t{}", f.bundle, f.error.replace(['\t', '\n'], " ")).unwrap();
    }
    out
}

const AUDIT_HEADER: &str = "lemma\tlayer_set\tvariant\tk\tperformance_ari\tvariable\tinfluence\trandom_baseline\tactual_baseline\tabove_random\tabove_actual\tabove_performance";

/// One row per lemma x layer set x variant x influence variable.
pub fn audit_tsv(reports: &[BiasReport]) -> String {
    let mut out = String::from(AUDIT_HEADER);
    out.push('\n');
    for r in reports {
        for row in &r.rows {
            let prefix = format!(
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.lemma,
                r.layer_set,
                r.variant,
                r.k,
                num(r.performance_ari),
                row.variable
            );
            match &row.scores {
                Some(s) => writeln!(
                    out,
                    "{prefix}\t{}\t{}\t{}\t{}\t{}\t{}",
                    s.influence,
                    s.random_baseline,
                    num(s.actual_baseline),
                    s.above_random,
                    flag(s.above_actual),
                    flag(s.above_performance)
                ),
                None => writeln!(out, "{prefix}{}", format!("\t{MISSING}").repeat(6)),
            }
            .unwrap();
        }
    }
    out
}

pub fn parse_audit_tsv(path: &Path, text: &str) -> Result<Vec<BiasReport>, PipelineError> {
    let mut reports: Vec<BiasReport> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if i == 0 {
            if line != AUDIT_HEADER {
                return Err(parse_err(path, lineno, "unexpected header"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let c: Vec<&str> = line.split('\t').collect();
        if c.len() != 12 {
            return Err(parse_err(
                path,
                lineno,
                format!("{} columns, expected 12", c.len()),
            ));
        }
        let layer_set: LayerSet = c[1]
            .parse()
            .map_err(|e| parse_err(path, lineno, format!("{e}")))?;
        let variant: Variant = c[2]
            .parse()
            .map_err(|e: String| parse_err(path, lineno, e))?;
        let k: usize = c[3].parse().map_err(|_| parse_err(path, lineno, "bad k"))?;
        let performance_ari = parse_num(path, lineno, c[4])?;
        let variable = InfluenceKind::ALL
            .into_iter()
            .find(|v| v.as_str() == c[5])
            .ok_or_else(|| parse_err(path, lineno, format!("unknown variable {:?}", c[5])))?;
        let scores = match parse_num(path, lineno, c[6])? {
            None => None,
            Some(influence) => Some(InfluenceScores {
                influence,
                random_baseline: parse_num(path, lineno, c[7])?
                    .ok_or_else(|| parse_err(path, lineno, "missing random baseline"))?,
                actual_baseline: parse_num(path, lineno, c[8])?,
                above_random: parse_flag(path, lineno, c[9])?
                    .ok_or_else(|| parse_err(path, lineno, "missing flag"))?,
                above_actual: parse_flag(path, lineno, c[10])?,
                above_performance: parse_flag(path, lineno, c[11])?,
            }),
        };
        let row = InfluenceRow { variable, scores };
        match reports
            .iter_mut()
            .find(|r| r.lemma == c[0] && r.layer_set == layer_set && r.variant == variant)
        {
            Some(r) => r.rows.push(row),
            None => reports.push(BiasReport {
                lemma: c[0].to_string(),
                layer_set,
                variant,
                k,
                performance_ari,
                rows: vec![row],
            }),
        }
    }
    Ok(reports)
}

/// Influence scores averaged over lemmas for one layer set x variant x variable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditSummaryRow {
    pub layer_set: LayerSet,
    pub variant: Variant,
    pub variable: InfluenceKind,
    pub n: usize,
    pub influence: Option<f64>,
    pub random_baseline: Option<f64>,
    pub actual_baseline: Option<f64>,
    pub performance_ari: Option<f64>,
}

impl AuditSummaryRow {
    /// Mean influence above the mean random and (when known) actual baselines.
    pub fn above_baselines(&self) -> bool {
        match (self.influence, self.random_baseline) {
            (Some(i), Some(r)) => i > r && self.actual_baseline.is_none_or(|a| i > a),
            _ => false,
        }
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn audit_summary(reports: &[BiasReport]) -> Vec<AuditSummaryRow> {
    #[derive(Default)]
    struct Acc {
        influence: Vec<f64>,
        random: Vec<f64>,
        actual: Vec<f64>,
        performance: Vec<f64>,
    }
    let mut groups: BTreeMap<(LayerSet, Variant, InfluenceKind), Acc> = BTreeMap::new();
    let mut order: Vec<(LayerSet, Variant, InfluenceKind)> = Vec::new();
    for r in reports {
        for row in &r.rows {
            let key = (r.layer_set.clone(), r.variant, row.variable);
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            let acc = groups.entry(key).or_default();
            if let Some(s) = &row.scores {
                acc.influence.push(s.influence);
                acc.random.push(s.random_baseline);
                acc.actual.extend(s.actual_baseline);
                acc.performance.extend(r.performance_ari);
            }
        }
    }
    order
        .into_iter()
        .map(|key| {
            let acc = &groups[&key];
            AuditSummaryRow {
                n: acc.influence.len(),
                influence: mean(&acc.influence),
                random_baseline: mean(&acc.random),
                actual_baseline: mean(&acc.actual),
                performance_ari: mean(&acc.performance),
                layer_set: key.0,
                variant: key.1,
                variable: key.2,
            }
        })
        .collect()
}

pub fn audit_summary_tsv(rows: &[AuditSummaryRow]) -> String {
    let mut out = String::from(
        "layer_set\tvariant\tvariable\tn\tinfluence\trandom_baseline\tactual_baseline\tperformance_ari\tabove_baselines\n",
    );
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.layer_set,
            r.variant,
            r.variable,
            r.n,
            num(r.influence),
            num(r.random_baseline),
            num(r.actual_baseline),
            num(r.performance_ari),
            r.above_baselines()
        )
        .unwrap();
    }
    out
}

fn cell(v: Option<f64>, bold: bool) -> String {
    match v {
        None => MISSING.to_string(),
        Some(x) if bold => format!("**{x:.3}**"),
        Some(x) => format!("{x:.3}"),
    }
}

fn distinct<T: Clone + PartialEq>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out = Vec::new();
    for item in items {
        if !out.contains(&item) {
            out.push(item);
        }
    }
    out
}

fn table_header(out: &mut String, first: &str, variants: &[Variant]) {
    let cols: Vec<String> = variants.iter().map(|v| v.to_string()).collect();
    writeln!(out, "| {first} | {} |", cols.join(" | ")).unwrap();
    writeln!(out, "|---|{}", "---|".repeat(variants.len())).unwrap();
}

/// Markdown tables: performance per measure (rows = layer sets, columns =
/// variants), influence per variable with bold marking scores above both
/// baselines, and the form/prediction correlation.
pub fn render_markdown(
    eval: &[EvalRow],
    audit: &[AuditSummaryRow],
    form_corr: &[EvalRow],
) -> String {
    let mut out = String::from("# Semantic change report\n");
    let perf_tables = |out: &mut String, title: &str, rows: &[EvalRow]| {
        if rows.is_empty() {
            return;
        }
        writeln!(out, "\n## {title}\n").unwrap();
        let variants = distinct(rows.iter().map(|r| r.variant));
        for measure in distinct(rows.iter().map(|r| r.measure)) {
            writeln!(out, "### {measure}\n").unwrap();
            table_header(out, "Layer", &variants);
            for set in distinct(
                rows.iter()
                    .filter(|r| r.measure == measure)
                    .map(|r| r.layer_set.clone()),
            ) {
                let cells: Vec<String> = variants
                    .iter()
                    .map(|v| {
                        let rho = rows
                            .iter()
                            .find(|r| r.measure == measure && r.layer_set == set && r.variant == *v)
                            .and_then(|r| r.rho);
                        cell(rho, false)
                    })
                    .collect();
                writeln!(out, "| {set} | {} |", cells.join(" | ")).unwrap();
            }
            out.push('\n');
        }
    };
    perf_tables(
        &mut out,
        "Performance (Spearman rho against gold graded change)",
        eval,
    );

    if !audit.is_empty() {
        writeln!(
            out,
            "\n## Cluster influence (mean ARI; bold = above both baselines)\n"
        )
        .unwrap();
        let variants = distinct(audit.iter().map(|r| r.variant));
        let sets = distinct(audit.iter().map(|r| r.layer_set.clone()));
        let find = |set: &LayerSet, v: Variant, kind: InfluenceKind| {
            audit
                .iter()
                .find(|r| r.layer_set == *set && r.variant == v && r.variable == kind)
        };
        writeln!(out, "### performance ARI\n").unwrap();
        table_header(&mut out, "Layer", &variants);
        for set in &sets {
            let cells: Vec<String> = variants
                .iter()
                .map(|v| {
                    cell(
                        find(set, *v, InfluenceKind::Form).and_then(|r| r.performance_ari),
                        false,
                    )
                })
                .collect();
            writeln!(out, "| {set} | {} |", cells.join(" | ")).unwrap();
        }
        out.push('\n');
        for kind in InfluenceKind::ALL {
            writeln!(out, "### {kind}\n").unwrap();
            table_header(&mut out, "Layer", &variants);
            for set in &sets {
                let cells: Vec<String> = variants
                    .iter()
                    .map(|v| match find(set, *v, kind) {
                        Some(r) => cell(r.influence, r.above_baselines()),
                        None => MISSING.to_string(),
                    })
                    .collect();
                writeln!(out, "| {set} | {} |", cells.join(" | ")).unwrap();
            }
            out.push('\n');
        }
    }
    perf_tables(
        &mut out,
        "Correlation of word form change and predictions",
        form_corr,
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_scores() -> Vec<ChangeScores> {
        vec![ChangeScores {
            lemma: "plane".into(),
            layer_set: "1+12".parse().unwrap(),
            variant: Variant::TokLem,
            jsd: Some(0.1 + 0.2),
            apd: None,
            apd_old: Some(1.0 / 3.0),
            apd_new: None,
            cos: Some(0.25),
            seed: 17,
        }]
    }

    #[test]
    fn scores_tsv_round_trips_exactly() {
        let scores = sample_scores();
        let text = scores_tsv(&scores, &Measure::ALL);
        assert!(text.contains("plane\t1+12\ttoklem\tapd\t–\t17"));
        let parsed = parse_scores_tsv(Path::new("scores.tsv"), &text).unwrap();
        assert_eq!(parsed, scores);
    }

    #[test]
    fn scores_tsv_rejects_garbage() {
        let bad = format!("{SCORES_HEADER}\nplane\t1\ttoken\tapd\tnope\t0\n");
        assert!(matches!(
            parse_scores_tsv(Path::new("s.tsv"), &bad),
            Err(PipelineError::Parse { line: 2, .. })
        ));
        assert!(parse_scores_tsv(Path::new("s.tsv"), "x\ty\n").is_err());
    }

    #[test]
    fn audit_tsv_round_trips_and_marks_missing_names() {
        let report = BiasReport {
            lemma: "plane".into(),
            layer_set: "12".parse().unwrap(),
            variant: Variant::Token,
            k: 3,
            performance_ari: Some(0.5),
            rows: vec![
                InfluenceRow {
                    variable: InfluenceKind::Form,
                    scores: Some(InfluenceScores::new(0.9, 0.001, Some(0.02), Some(0.5))),
                },
                InfluenceRow {
                    variable: InfluenceKind::Names,
                    scores: None,
                },
            ],
        };
        let text = audit_tsv(std::slice::from_ref(&report));
        assert!(text
            .lines()
            .nth(2)
            .unwrap()
            .ends_with("names\t–\t–\t–\t–\t–\t–"));
        let parsed = parse_audit_tsv(Path::new("audit.tsv"), &text).unwrap();
        assert_eq!(parsed, vec![report.clone()]);

        let summary = audit_summary(&[report]);
        assert_eq!(summary.len(), 2);
        assert!(summary[0].above_baselines());
        assert_eq!(summary[1].influence, None);
        let md = render_markdown(&[], &summary, &[]);
        assert!(md.contains("| 12 | **0.900** |"));
        assert!(md.contains("### names"));
        assert!(md.contains("| 12 | – |"));
    }
}
