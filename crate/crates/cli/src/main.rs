use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use semshift::corpus::{discover_bundles, load_bundle, Variant};
use semshift::embedding::LayerSet;
use semshift::measures::Measure;
use semshift::pipeline::{
    collect_facts, form_map, gold_map, run_audit, run_cluster, run_eval, run_form_correlation,
    run_measure, ApdModeKind, BundleFailure, LabelSource, PipelineError, RunConfig, RunOutput,
};
use semshift::report::{
    audit_summary, audit_summary_tsv, audit_tsv, clusters_tsv, eval_tsv, failures_tsv,
    parse_audit_tsv, parse_scores_tsv, render_markdown, scores_tsv, to_json,
};
use semshift::synth::SynthSuite;

const EXIT_FATAL: u8 = 1;
const EXIT_PARTIAL: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    author,
    version,
    about = "Semantic change detection over contextualized token vectors"
)]
struct Cli {
    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads.
    #[arg(long, global = true, env = "SEMSHIFT_JOBS")]
    jobs: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load and check every bundle under a directory.
    Validate { root: PathBuf },
    /// Generate synthetic bundles from a suite TOML file.
    Synth { suite: PathBuf },
    /// Cluster usages per lemma, variant and layer set.
    Cluster(RunArgs),
    /// Compute change scores.
    Measure(RunArgs),
    /// Audit clusterings for form, position, name and corpus influence.
    Audit(RunArgs),
    /// Correlate scores with gold graded change and with form change.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Scores TSV; defaults to <out>/scores.tsv.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Render Markdown tables from scores and audit output.
    Report {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        audit: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ApdArg {
    Exact,
    Sampled,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LabelArg {
    Inferred,
    Gold,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Bundle directory (or a single bundle).
    root: Option<PathBuf>,

    /// Comma-separated layer sets, e.g. 1,12,1+12,9-12.
    #[arg(long, value_delimiter = ',')]
    layer_sets: Vec<LayerSet>,

    #[arg(long, value_delimiter = ',')]
    variants: Vec<Variant>,

    #[arg(long, value_delimiter = ',')]
    measures: Vec<Measure>,

    #[arg(long, value_enum)]
    apd_mode: Option<ApdArg>,

    /// Labels used by the JSD measure.
    #[arg(long, value_enum)]
    jsd_labels: Option<LabelArg>,

    #[arg(long)]
    max_pairs: Option<usize>,

    /// Shuffles behind each random baseline.
    #[arg(long)]
    rounds: Option<usize>,

    #[arg(long)]
    k_min: Option<usize>,

    #[arg(long)]
    k_max: Option<usize>,
}

struct Globals {
    config: Option<PathBuf>,
    seed: Option<u64>,
    jobs: Option<usize>,
    out: PathBuf,
}

impl Globals {
    fn run_config(&self, args: &RunArgs) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                RunConfig::from_toml(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => match &args.root {
                Some(root) => RunConfig::new(root),
                None => bail!("no bundle directory given (pass it or set bundle_root in --config)"),
            },
        };
        if let Some(root) = &args.root {
            config.bundle_root = root.clone();
        }
        if !args.layer_sets.is_empty() {
            config.layer_sets = args.layer_sets.clone();
        }
        if !args.variants.is_empty() {
            config.variants = args.variants.clone();
        }
        if !args.measures.is_empty() {
            config.measures = args.measures.clone();
        }
        if let Some(mode) = args.apd_mode {
            config.apd_mode = match mode {
                ApdArg::Exact => ApdModeKind::Exact,
                ApdArg::Sampled => ApdModeKind::Sampled,
            };
        }
        if let Some(labels) = args.jsd_labels {
            config.jsd_labels = match labels {
                LabelArg::Inferred => LabelSource::Inferred,
                LabelArg::Gold => LabelSource::Gold,
            };
        }
        if let Some(v) = args.max_pairs {
            config.max_pairs = v;
        }
        if let Some(v) = args.rounds {
            config.random_rounds = v;
        }
        if let Some(v) = args.k_min {
            config.k_range.k_min = v;
        }
        if let Some(v) = args.k_max {
            config.k_range.k_max = v;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if self.jobs.is_some() {
            config.jobs = self.jobs;
        }
        config.validate()?;
        Ok(config)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        info!("wrote {}", path.display());
        Ok(())
    }

    fn default_input(&self, given: &Option<PathBuf>, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(name))
    }
}

enum Status {
    Ok,
    Partial,
}

/// Reports warnings and failures, writes failures.tsv, and maps the outcome to a status.
fn finish<T>(globals: &Globals, output: &RunOutput<T>) -> Result<Status> {
    for w in &output.warnings {
        warn!("{w}");
    }
    report_failures(globals, &output.failures)
}

fn report_failures(globals: &Globals, failures: &[BundleFailure]) -> Result<Status> {
    globals.write("failures.tsv", &failures_tsv(failures))?;
    for f in failures {
        eprintln!("failed: {}: {}", f.bundle, f.error);
    }
    Ok(if failures.is_empty() {
        Status::Ok
    } else {
        Status::Partial
    })
}

fn validate(root: &Path) -> Result<Status> {
    let paths = discover_bundles(root).with_context(|| format!("reading {}", root.display()))?;
    if paths.is_empty() {
        return Err(PipelineError::NoBundles(root.to_path_buf()).into());
    }
    let mut failed = 0;
    for path in &paths {
        match load_bundle(path) {
            Ok(bundle) => {
                let note = if bundle.degenerate() {
                    " (degenerate)"
                } else {
                    ""
                };
                println!(
                    "ok\t{}\t{} usages{note}",
                    path.display(),
                    bundle.usages.len()
                );
            }
            Err(e) => {
                failed += 1;
                println!("error\t{}\t{e}", path.display());
            }
        }
    }
    Ok(if failed == 0 {
        Status::Ok
    } else {
        Status::Partial
    })
}

fn synth(globals: &Globals, suite: &Path) -> Result<Status> {
    let text = fs::read_to_string(suite).with_context(|| format!("reading {}", suite.display()))?;
    let mut suite = SynthSuite::from_toml(&text)?;
    if let Some(seed) = globals.seed {
        for (i, spec) in suite.target.iter_mut().enumerate() {
            spec.seed = semshift::seed::derive_seed(seed, &[&spec.lemma, &i.to_string()]);
        }
    }
    for dir in suite.write(&globals.out)? {
        println!("{}", dir.display());
    }
    Ok(Status::Ok)
}

fn cluster(globals: &Globals, args: &RunArgs) -> Result<Status> {
    let config = globals.run_config(args)?;
    let output = run_cluster(&config)?;
    globals.write("clusters.tsv", &clusters_tsv(&output.items))?;
    globals.write("clusters.json", &to_json(&output.items))?;
    finish(globals, &output)
}

fn measure(globals: &Globals, args: &RunArgs) -> Result<Status> {
    let config = globals.run_config(args)?;
    let output = run_measure(&config)?;
    globals.write("scores.tsv", &scores_tsv(&output.items, &config.measures))?;
    globals.write("scores.json", &to_json(&output.items))?;
    finish(globals, &output)
}

fn audit(globals: &Globals, args: &RunArgs) -> Result<Status> {
    let config = globals.run_config(args)?;
    let output = run_audit(&config)?;
    globals.write("audit.tsv", &audit_tsv(&output.items))?;
    globals.write("audit.json", &to_json(&output.items))?;
    let summary = audit_summary(&output.items);
    globals.write("audit_summary.tsv", &audit_summary_tsv(&summary))?;
    finish(globals, &output)
}

fn read_scores(path: &Path) -> Result<Vec<semshift::ChangeScores>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_scores_tsv(path, &text)?)
}

fn eval(globals: &Globals, args: &RunArgs, scores: &Option<PathBuf>) -> Result<Status> {
    let config = globals.run_config(args)?;
    let scores = read_scores(&globals.default_input(scores, "scores.tsv"))?;
    let facts = collect_facts(&config)?;
    let rows = run_eval(&scores, &gold_map(&facts.items))?;
    globals.write("eval.tsv", &eval_tsv(&rows))?;
    globals.write("eval.json", &to_json(&rows))?;
    match run_form_correlation(&scores, &form_map(&facts.items)) {
        Ok(form) => globals.write("form_correlation.tsv", &eval_tsv(&form))?,
        Err(e) => warn!("form correlation skipped: {e}"),
    }
    finish(globals, &facts)
}

fn report(
    globals: &Globals,
    args: &RunArgs,
    scores: &Option<PathBuf>,
    audit: &Option<PathBuf>,
) -> Result<Status> {
    let config = globals.run_config(args)?;
    let scores = read_scores(&globals.default_input(scores, "scores.tsv"))?;
    let facts = collect_facts(&config)?;
    let eval = run_eval(&scores, &gold_map(&facts.items)).unwrap_or_else(|e| {
        warn!("evaluation skipped: {e}");
        Vec::new()
    });
    let form = run_form_correlation(&scores, &form_map(&facts.items)).unwrap_or_else(|e| {
        warn!("form correlation skipped: {e}");
        Vec::new()
    });
    let audit_path = globals.default_input(audit, "audit.tsv");
    let summary = if audit_path.is_file() {
        let text = fs::read_to_string(&audit_path)
            .with_context(|| format!("reading {}", audit_path.display()))?;
        audit_summary(&parse_audit_tsv(&audit_path, &text)?)
    } else {
        warn!("{} not found; audit tables omitted", audit_path.display());
        Vec::new()
    };
    let markdown = render_markdown(&eval, &summary, &form);
    globals.write("report.md", &markdown)?;
    print!("{markdown}");
    finish(globals, &facts)
}

fn run(cli: Cli) -> Result<Status> {
    let globals = Globals {
        config: cli.config,
        seed: cli.seed,
        jobs: cli.jobs,
        out: cli.out,
    };
    match &cli.command {
        Command::Validate { root } => validate(root),
        Command::Synth { suite } => synth(&globals, suite),
        Command::Cluster(args) => cluster(&globals, args),
        Command::Measure(args) => measure(&globals, args),
        Command::Audit(args) => audit(&globals, args),
        Command::Eval { run, scores } => eval(&globals, run, scores),
        Command::Report { run, scores, audit } => report(&globals, run, scores, audit),
    }
}

/// The error chain joined by ": ", skipping causes their parent already prints.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(EXIT_PARTIAL),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(EXIT_FATAL)
        }
    }
}
