//! The `aequiv` command line.
//!
//! Every subcommand reads its inputs, writes machine-readable results (CSV,
//! JSON, JSONL) plus a markdown summary under `--out`, and records a
//! `run_metadata.json` with the tool version, seed, resolved settings and
//! SHA-256 digests of the inputs. Nothing in the outputs depends on the
//! clock, so identical inputs, flags and seed give identical bytes.
//!
//! Settings resolve as: command-line flag, then `--config` TOML file, then
//! the built-in default.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotations::{aggregate_examples, agreement_stats, f1_histogram, AnnotationError, EquivalenceLabel, DEFAULT_BIN_COUNT};
use crate::bridge::{BridgeClient, BridgeError, Endpoint, DEFAULT_TIMEOUT};
use crate::conformal::{run_trials, Admission, AdmissionKind, ConformalError, ConformalQuestion, TrialConfig};
use crate::dataset::{
    load_admission_labels, load_ae_examples_with, load_candidate_sets_limited, load_predictions, load_reference_sets,
    load_score_file, write_jsonl, AEExample, DatasetError, IngestionAdapter, ReferenceSet, SourceSystem, Split,
    DEFAULT_MAX_CANDIDATES,
};
use crate::lexical::NormalizationProfile;
use crate::scoring::{
    classifier_report, per_system_accuracy, tune_threshold, EquivalenceScorer, ScoreQuery, ScorerKind, ScoringError,
    ThresholdedClassifier,
};
use crate::system_eval::{bootstrap_ci, per_question_credit, BootstrapConfig, CreditMode, EquivalenceFn, EvalError, HumanJudgments};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_BRIDGE: i32 = 4;

const DEFAULT_TARGETS: [f64; 4] = [0.7, 0.8, 0.9, 0.95];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("bridge: {0}")]
    Bridge(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Bridge(_) => EXIT_BRIDGE,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<BridgeError> for CliError {
    fn from(e: BridgeError) -> Self {
        CliError::Bridge(e.to_string())
    }
}

impl From<ScoringError> for CliError {
    fn from(e: ScoringError) -> Self {
        match e {
            ScoringError::Bridge(b) => b.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Scoring(s) => s.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<AnnotationError> for CliError {
    fn from(e: AnnotationError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ConformalError> for CliError {
    fn from(e: ConformalError) -> Self {
        CliError::Validation(e.to_string())
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "aequiv", version, about = "Answer-equivalence evaluation for extractive QA")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check an AE example file and print a summary.
    Validate(Options),
    /// Majority-vote labels per example (seeded tie-breaks).
    Aggregate(Options),
    /// Token F1 histogram of the reference/candidate pairs by label.
    Histogram(Options),
    /// Pick the accuracy-maximizing threshold for a scorer on one split.
    Tune(Options),
    /// Accuracy and Spearman's rho of a thresholded scorer on one split.
    Classify(Options),
    /// System accuracy under several equivalence functions, with bootstrap intervals.
    SystemEval(Options),
    /// Conformal prediction sets: size and accuracy per target accuracy.
    Calibrate(Options),
    /// Rater agreement and per-system equivalence rates.
    Report(Options),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate(_) => "validate",
            Command::Aggregate(_) => "aggregate",
            Command::Histogram(_) => "histogram",
            Command::Tune(_) => "tune",
            Command::Classify(_) => "classify",
            Command::SystemEval(_) => "system-eval",
            Command::Calibrate(_) => "calibrate",
            Command::Report(_) => "report",
        }
    }

    fn options(&self) -> &Options {
        match self {
            Command::Validate(o)
            | Command::Aggregate(o)
            | Command::Histogram(o)
            | Command::Tune(o)
            | Command::Classify(o)
            | Command::SystemEval(o)
            | Command::Calibrate(o)
            | Command::Report(o) => o,
        }
    }

    fn seeded(&self) -> bool {
        !matches!(self, Command::Validate(_))
    }
}

/// Options shared by every subcommand; each uses the subset it needs. Any
/// of them except `--config` may also be set in the TOML config file, with
/// keys spelled with underscores.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Options {
    /// TOML file with default settings.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing). Not recorded in the run
    /// metadata, so results do not depend on where they are written.
    #[arg(long)]
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    /// Seed for every random choice. Required by all but `validate`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Normalization profile: simple or squad-official.
    #[arg(long)]
    pub norm: Option<String>,
    /// AE examples (JSONL).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// TOML field-renaming adapter for AE examples.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Split to use (train, dev or test).
    #[arg(long)]
    pub split: Option<String>,
    /// Scorer: f1, em, file:PATH or bridge[:URL-or-command].
    #[arg(long)]
    pub scorer: Option<String>,
    /// Average the scorer over both answer orders.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub symmetrize: Option<bool>,
    /// Decision threshold on scorer output.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Histogram bin count.
    #[arg(long)]
    pub bins: Option<usize>,
    /// System predictions (JSONL: question_id, answer).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Reference sets (JSONL: question_id, question, references).
    #[arg(long)]
    pub references: Option<PathBuf>,
    /// AE examples whose aggregated labels act as human judgments.
    #[arg(long)]
    pub judgments: Option<PathBuf>,
    /// Credit for non-exact answers: mean-score or thresholded.
    #[arg(long)]
    pub credit: Option<String>,
    /// Use only the first k references per question.
    #[arg(long)]
    pub max_refs: Option<usize>,
    /// Bootstrap replicates.
    #[arg(long)]
    pub bootstrap_b: Option<usize>,
    /// Bootstrap confidence level.
    #[arg(long)]
    pub level: Option<f64>,
    /// Candidate sets (JSONL: question_id, candidates).
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Extra exactly-admissible answers (JSONL: question_id, admitted_answer_texts).
    #[arg(long)]
    pub admission_labels: Option<PathBuf>,
    /// Comma-separated admission functions: squad, ae, f1, scorer.
    #[arg(long)]
    pub admission: Option<String>,
    /// Token F1 threshold for the f1 admission function.
    #[arg(long)]
    pub f1_threshold: Option<f64>,
    /// Comma-separated target accuracies.
    #[arg(long)]
    pub targets: Option<String>,
    /// Calibration trials.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Calibration share of each random partition.
    #[arg(long)]
    pub calib_frac: Option<f64>,
    /// Share of the calibration split used to estimate the correction.
    #[arg(long)]
    pub holdout_frac: Option<f64>,
    /// Confidence parameter of the correction bound.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Candidates kept per question.
    #[arg(long)]
    pub max_candidates: Option<usize>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl Options {
    /// Fill unset fields from `other`.
    fn or(mut self, other: &Options) -> Options {
        overlay!(self, other; out, seed, norm, input, adapter, split, scorer, symmetrize, threshold, bins,
            predictions, references, judgments, credit, max_refs, bootstrap_b, level, candidates,
            admission_labels, admission, f1_threshold, targets, trials, calib_frac, holdout_frac, gamma,
            max_candidates);
        self
    }

    fn resolve(&self) -> Result<Options> {
        let Some(path) = &self.config else {
            return Ok(self.clone());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let file: Options =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let mut merged = self.clone().or(&file);
        // config-relative paths resolve against the config file's directory
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut merged.input,
            &mut merged.adapter,
            &mut merged.predictions,
            &mut merged.references,
            &mut merged.judgments,
            &mut merged.candidates,
            &mut merged.admission_labels,
            &mut merged.out,
        ] {
            if let Some(v) = p.as_mut() {
                if v.is_relative() && file_sets(&file, v) {
                    *v = base.join(&*v);
                }
            }
        }
        Ok(merged)
    }

    fn profile(&self) -> Result<NormalizationProfile> {
        NormalizationProfile::from_str(self.norm.as_deref().unwrap_or("simple")).map_err(|e| CliError::Usage(e.to_string()))
    }

    fn seed(&self, cmd: &str) -> Result<u64> {
        self.seed
            .ok_or_else(|| CliError::Usage(format!("`{cmd}` is randomized and needs an explicit --seed")))
    }

    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("--out <DIR> is required".into()))
    }

    fn split(&self, default: Split) -> Result<Split> {
        match &self.split {
            None => Ok(default),
            Some(s) => s.parse().map_err(CliError::Usage),
        }
    }

    fn adapter(&self) -> Result<IngestionAdapter> {
        match &self.adapter {
            None => Ok(IngestionAdapter::default()),
            Some(p) => Ok(IngestionAdapter::from_toml_file(p)?),
        }
    }

    fn threshold(&self) -> Result<f64> {
        let t = self.threshold.unwrap_or(ThresholdedClassifier::DEFAULT_THRESHOLD);
        unit_interval("--threshold", t)
    }
}

// Whether `v` came from the config file rather than the command line.
fn file_sets(file: &Options, v: &Path) -> bool {
    [
        &file.input,
        &file.adapter,
        &file.predictions,
        &file.references,
        &file.judgments,
        &file.candidates,
        &file.admission_labels,
        &file.out,
    ]
    .iter()
    .any(|p| p.as_deref() == Some(v))
}

fn unit_interval(flag: &str, v: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(CliError::Usage(format!("{flag} {v} outside [0, 1]")))
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("{flag} <PATH> is required")))
}

fn parse_list<T: FromStr>(flag: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| CliError::Usage(format!("{flag}: cannot parse `{x}`"))))
        .collect()
}

/// Build a scorer from `f1`, `em`, `file:PATH` or `bridge[:ENDPOINT]`.
pub fn build_scorer(spec: &str, profile: NormalizationProfile, symmetrize: bool) -> Result<EquivalenceScorer> {
    let kind = if spec == "f1" {
        ScorerKind::LexicalF1(profile)
    } else if spec == "em" {
        ScorerKind::ExactMatch(profile)
    } else if let Some(path) = spec.strip_prefix("file:") {
        ScorerKind::ScoreFile(load_score_file(Path::new(path))?)
    } else if spec == "bridge" || spec.starts_with("bridge:") {
        let endpoint = Endpoint::resolve(spec.strip_prefix("bridge:"))?;
        ScorerKind::RemoteBridge(BridgeClient::connect(&endpoint, DEFAULT_TIMEOUT)?)
    } else {
        return Err(CliError::Usage(format!(
            "unknown scorer `{spec}` (expected f1, em, file:PATH or bridge[:ENDPOINT])"
        )));
    };
    let scorer = EquivalenceScorer::new(kind);
    Ok(if symmetrize { scorer.symmetrized() } else { scorer })
}

/// Input files named by `opts`, checked to exist before any work starts.
fn input_paths(opts: &Options) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = [
        &opts.input,
        &opts.adapter,
        &opts.predictions,
        &opts.references,
        &opts.judgments,
        &opts.candidates,
        &opts.admission_labels,
    ]
    .into_iter()
    .flatten()
    .cloned()
    .collect();
    if let Some(file) = opts.scorer.as_deref().and_then(|s| s.strip_prefix("file:")) {
        paths.push(PathBuf::from(file));
    }
    for p in &paths {
        if !p.is_file() {
            return Err(CliError::Io(format!("{}: no such file", p.display())));
        }
    }
    Ok(paths)
}

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    seed: Option<u64>,
    inputs: Vec<InputDigest>,
    /// Settings given on the command line or in the config file.
    settings: serde_json::Value,
}

fn given_settings(opts: &Options) -> serde_json::Value {
    let mut v = serde_json::to_value(opts).expect("options serialize");
    if let serde_json::Value::Object(map) = &mut v {
        map.retain(|_, x| !x.is_null());
    }
    v
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// Output directory writer.
struct Outputs {
    dir: PathBuf,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn text(&self, name: &str, body: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, body).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut body = serde_json::to_string_pretty(value).expect("serializable report");
        body.push('\n');
        self.text(name, &body)
    }

    fn csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let p = self.path(name);
        let io = |e: csv::Error| CliError::Io(format!("{}: {e}", p.display()));
        let mut w = csv::Writer::from_path(&p).map_err(io)?;
        for r in rows {
            w.serialize(r).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
    }

    fn jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        Ok(write_jsonl(&self.path(name), rows)?)
    }
}

/// Markdown table from a header and rows of cells.
fn md_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(s, "| {} |", r.join(" | "));
    }
    s
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Parse `argv` (program name first) and run. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("aequiv {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

/// Run a parsed command; returns the text printed on success.
pub fn execute(command: &Command) -> Result<String> {
    let opts = command.options().resolve()?;
    let name = command.name();
    if command.seeded() {
        opts.seed(name)?;
    }
    let inputs = input_paths(&opts)?;
    let outputs = match (&opts.out, command) {
        (None, Command::Validate(_)) => None,
        _ => Some(Outputs::create(opts.out()?)?),
    };
    let summary = match command {
        Command::Validate(_) => validate(&opts, outputs.as_ref())?,
        Command::Aggregate(_) => aggregate(&opts, outputs.as_ref().expect("out"))?,
        Command::Histogram(_) => histogram(&opts, outputs.as_ref().expect("out"))?,
        Command::Tune(_) => tune(&opts, outputs.as_ref().expect("out"))?,
        Command::Classify(_) => classify(&opts, outputs.as_ref().expect("out"))?,
        Command::SystemEval(_) => system_eval(&opts, outputs.as_ref().expect("out"))?,
        Command::Calibrate(_) => calibrate(&opts, outputs.as_ref().expect("out"))?,
        Command::Report(_) => report(&opts, outputs.as_ref().expect("out"))?,
    };
    if let Some(out) = &outputs {
        let digests = inputs
            .iter()
            .map(|p| {
                Ok(InputDigest {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.json(
            "run_metadata.json",
            &RunMetadata {
                tool: "aequiv",
                version: env!("CARGO_PKG_VERSION"),
                subcommand: name,
                seed: opts.seed,
                inputs: digests,
                settings: given_settings(&opts),
            },
        )?;
        out.text(&format!("{}.md", name.replace('-', "_")), &summary)?;
    }
    Ok(summary)
}

fn load_examples(opts: &Options, splits: Option<&[Split]>) -> Result<Vec<AEExample>> {
    let path = required(&opts.input, "--input")?;
    Ok(load_ae_examples_with(path, splits, &opts.adapter()?)?)
}

/// Examples with an aggregated label, in file order.
fn labeled(opts: &Options, splits: Option<&[Split]>) -> Result<Vec<(AEExample, EquivalenceLabel)>> {
    let examples = load_examples(opts, splits)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.expect("seed checked"));
    let labels = aggregate_examples(&examples, &mut rng)?;
    Ok(examples
        .into_iter()
        .zip(labels)
        .filter_map(|(e, l)| l.map(|l| (e, l)))
        .collect())
}

fn validate(opts: &Options, out: Option<&Outputs>) -> Result<String> {
    let examples = load_examples(opts, None)?;
    let mut by_split: BTreeMap<Split, usize> = BTreeMap::new();
    let mut rated = 0;
    for e in &examples {
        *by_split.entry(e.split).or_default() += 1;
        rated += usize::from(!e.ratings.is_empty());
    }
    let splits: Vec<String> = by_split.iter().map(|(s, n)| format!("{s} {n}")).collect();
    let line = format!(
        "{} examples valid ({}); {} rated\n",
        examples.len(),
        if splits.is_empty() { "none".into() } else { splits.join(", ") },
        rated
    );
    if let Some(out) = out {
        #[derive(Serialize)]
        struct Summary {
            examples: usize,
            rated: usize,
            by_split: BTreeMap<Split, usize>,
        }
        out.json(
            "validate.json",
            &Summary {
                examples: examples.len(),
                rated,
                by_split,
            },
        )?;
    }
    Ok(line)
}

fn aggregate(opts: &Options, out: &Outputs) -> Result<String> {
    #[derive(Serialize)]
    struct Row<'a> {
        example_id: &'a str,
        label: String,
        equivalent: bool,
        n_ratings: usize,
    }
    let items = labeled(opts, None)?;
    let rows: Vec<Row> = items
        .iter()
        .map(|(e, l)| Row {
            example_id: &e.example_id,
            label: l.to_string(),
            equivalent: l.is_equivalent(),
            n_ratings: e.ratings.len(),
        })
        .collect();
    out.jsonl("labels.jsonl", &rows)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for (_, l) in &items {
        *counts.entry(l.to_string()).or_default() += 1;
    }
    let table: Vec<Vec<String>> = counts.iter().map(|(k, v)| vec![k.clone(), v.to_string()]).collect();
    Ok(format!("# Aggregated labels\n\n{}", md_table(&["label", "examples"], &table)))
}

fn histogram(opts: &Options, out: &Outputs) -> Result<String> {
    let items = labeled(opts, None)?;
    let refs: Vec<(&AEExample, EquivalenceLabel)> = items.iter().map(|(e, l)| (e, *l)).collect();
    let report = f1_histogram(&refs, opts.bins.unwrap_or(DEFAULT_BIN_COUNT), opts.profile()?)?;
    out.csv("histogram.csv", &report.bins)?;
    let rows: Vec<Vec<String>> = report
        .bins
        .iter()
        .map(|b| {
            vec![
                format!("[{:.2}, {:.2}{}", b.f1_lower, b.f1_upper, if b.f1_upper >= 1.0 { "]" } else { ")" }),
                b.equivalent.to_string(),
                b.different.to_string(),
                b.degraded.to_string(),
            ]
        })
        .collect();
    Ok(format!(
        "# Token F1 by label\n\n{}",
        md_table(&["F1", "equivalent", "different", "degraded"], &rows)
    ))
}

/// Scores for labeled examples, queried by example id.
fn score_examples(opts: &Options, items: &[(AEExample, EquivalenceLabel)]) -> Result<(Vec<f64>, Vec<bool>)> {
    let spec = opts.scorer.as_deref().unwrap_or("f1");
    let mut scorer = build_scorer(spec, opts.profile()?, opts.symmetrize.unwrap_or(false))?;
    let queries: Vec<ScoreQuery> = items
        .iter()
        .map(|(e, _)| ScoreQuery::new(e.example_id.clone(), &e.question, &e.reference, &e.candidate))
        .collect();
    let scores = scorer.score_batch(&queries)?;
    let labels = items.iter().map(|(_, l)| l.is_equivalent()).collect();
    Ok((scores, labels))
}

fn tune(opts: &Options, out: &Outputs) -> Result<String> {
    let split = opts.split(Split::Train)?;
    let items = labeled(opts, Some(&[split]))?;
    let (scores, labels) = score_examples(opts, &items)?;
    let tuned = tune_threshold(&scores, &labels)?;
    #[derive(Serialize)]
    struct Tuned {
        split: Split,
        scorer: String,
        threshold: f64,
        accuracy: f64,
        n: usize,
    }
    let scorer = opts.scorer.clone().unwrap_or_else(|| "f1".into());
    out.json(
        "tune.json",
        &Tuned {
            split,
            scorer: scorer.clone(),
            threshold: tuned.threshold,
            accuracy: tuned.accuracy,
            n: scores.len(),
        },
    )?;
    Ok(format!(
        "# Tuned threshold\n\n{}",
        md_table(
            &["split", "scorer", "threshold", "accuracy (%)", "n"],
            &[vec![
                split.to_string(),
                scorer,
                format!("{:.4}", tuned.threshold),
                pct(tuned.accuracy),
                scores.len().to_string()
            ]]
        )
    ))
}

fn classify(opts: &Options, out: &Outputs) -> Result<String> {
    let split = opts.split(Split::Dev)?;
    let items = labeled(opts, Some(&[split]))?;
    let (scores, labels) = score_examples(opts, &items)?;
    let classifier = ThresholdedClassifier::new(opts.threshold()?)?;
    let report = classifier_report(&classifier, &scores, &labels)?;
    let per_system_items: Vec<(SourceSystem, f64, bool)> = items
        .iter()
        .zip(scores.iter().zip(&labels))
        .map(|((e, _), (&s, &l))| (e.source_system, s, l))
        .collect();
    let per_system = per_system_accuracy(&classifier, &per_system_items)?;
    out.json("classify.json", &report)?;
    #[derive(Serialize)]
    struct SysRow {
        system: SourceSystem,
        accuracy: f64,
        n: usize,
    }
    let sys_rows: Vec<SysRow> = per_system
        .iter()
        .map(|(s, a)| SysRow {
            system: *s,
            accuracy: a.accuracy,
            n: a.n,
        })
        .collect();
    out.csv("per_system.csv", &sys_rows)?;
    let rho = report.spearman_rho.map_or("undefined".to_string(), pct);
    let mut md = format!(
        "# Classifier on {split}\n\n{}",
        md_table(
            &["scorer", "threshold", "accuracy (%)", "rho (x100)", "n"],
            &[vec![
                opts.scorer.clone().unwrap_or_else(|| "f1".into()),
                format!("{:.4}", report.threshold),
                pct(report.accuracy),
                rho,
                report.n.to_string()
            ]]
        )
    );
    let rows: Vec<Vec<String>> = sys_rows
        .iter()
        .map(|r| vec![r.system.to_string(), pct(r.accuracy), r.n.to_string()])
        .collect();
    let _ = write!(md, "\n## Per system\n\n{}", md_table(&["system", "accuracy (%)", "n"], &rows));
    Ok(md)
}

fn system_eval(opts: &Options, out: &Outputs) -> Result<String> {
    let profile = opts.profile()?;
    let preds = load_predictions(required(&opts.predictions, "--predictions")?)?;
    let refs: HashMap<String, ReferenceSet> = load_reference_sets(required(&opts.references, "--references")?)?
        .into_iter()
        .map(|r| (r.question_id.clone(), r))
        .collect();
    let config = BootstrapConfig {
        replicates: opts.bootstrap_b.unwrap_or(BootstrapConfig::default().replicates),
        level: opts.level.unwrap_or(BootstrapConfig::default().level),
    };
    let credit_mode = match opts.credit.as_deref().unwrap_or("mean-score") {
        "mean-score" => CreditMode::MeanScore,
        "thresholded" => CreditMode::Thresholded(opts.threshold()?),
        other => return Err(CliError::Usage(format!("--credit `{other}`: expected mean-score or thresholded"))),
    };
    let k = opts.max_refs;

    let human = match &opts.judgments {
        None => None,
        Some(path) => {
            let examples = load_ae_examples_with(path, None, &opts.adapter()?)?;
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.expect("seed checked"));
            let labels = aggregate_examples(&examples, &mut rng)?;
            Some(HumanJudgments::from_labeled(&examples, &labels))
        }
    };
    let mut scorer = match &opts.scorer {
        None => None,
        Some(spec) => Some(build_scorer(spec, profile, opts.symmetrize.unwrap_or(false))?),
    };

    let mut metrics: Vec<(String, EquivalenceFn, CreditMode)> = vec![
        ("em".into(), EquivalenceFn::None, CreditMode::MeanScore),
        ("f1".into(), EquivalenceFn::TokenF1, credit_mode),
    ];
    if let Some(s) = scorer.as_mut() {
        let threshold = opts.threshold()?;
        metrics.push((format!("scorer:{}", s.name()), EquivalenceFn::Scorer(s), CreditMode::Thresholded(threshold)));
    }
    if let Some(h) = &human {
        metrics.push(("human".into(), EquivalenceFn::Human(h), CreditMode::Thresholded(0.5)));
    }

    // one stream per metric so adding a metric leaves the others unchanged
    let seed = opts.seed.expect("seed checked");
    let mut reports = Vec::new();
    for (i, (name, mut f, mode)) in metrics.into_iter().enumerate() {
        let credit = per_question_credit(&preds, &refs, &mut f, mode, k, profile)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        reports.push(bootstrap_ci(&name, &credit, config, &mut rng)?);
    }
    out.csv("system_eval.csv", &reports)?;
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.metric.clone(),
                format!("{:.2}", r.estimate),
                format!("{:.2}", r.ci_half_width),
                format!("[{:.2}, {:.2}]", r.ci_lower, r.ci_upper),
                r.n_questions.to_string(),
            ]
        })
        .collect();
    Ok(format!(
        "# System accuracy ({}% bootstrap, B = {})\n\n{}",
        config.level * 100.0,
        config.replicates,
        md_table(&["metric", "accuracy (%)", "+/-", "interval", "questions"], &rows)
    ))
}

fn calibrate(opts: &Options, out: &Outputs) -> Result<String> {
    let profile = opts.profile()?;
    let targets: Vec<f64> = match &opts.targets {
        None => DEFAULT_TARGETS.to_vec(),
        Some(s) => parse_list("--targets", s)?,
    };
    if targets.is_empty() {
        return Err(CliError::Usage("--targets is empty".into()));
    }
    let admission_names: Vec<String> = parse_list("--admission", opts.admission.as_deref().unwrap_or("squad,ae"))?;
    let mut admissions = Vec::new();
    for a in &admission_names {
        let kind = match a.as_str() {
            "squad" => AdmissionKind::SquadOnly,
            "ae" => AdmissionKind::ExactLabels,
            "f1" => AdmissionKind::ApproxF1 {
                threshold: unit_interval("--f1-threshold", opts.f1_threshold.unwrap_or(0.5))?,
            },
            "scorer" => AdmissionKind::ApproxScorer {
                threshold: opts.threshold()?,
            },
            other => {
                return Err(CliError::Usage(format!(
                    "--admission `{other}`: expected squad, ae, f1 or scorer"
                )))
            }
        };
        admissions.push(Admission { kind, profile });
    }

    let sets = load_candidate_sets_limited(
        required(&opts.candidates, "--candidates")?,
        Some(opts.max_candidates.unwrap_or(DEFAULT_MAX_CANDIDATES)),
    )?;
    let refs: HashMap<String, ReferenceSet> = load_reference_sets(required(&opts.references, "--references")?)?
        .into_iter()
        .map(|r| (r.question_id.clone(), r))
        .collect();
    let extra: HashMap<String, Vec<String>> = match &opts.admission_labels {
        None => HashMap::new(),
        Some(p) => load_admission_labels(p)?
            .into_iter()
            .map(|l| (l.question_id, l.admitted_answer_texts))
            .collect(),
    };
    if opts.admission_labels.is_none() {
        eprintln!("note: no --admission-labels; exact admission falls back to the references alone");
    }

    let mut questions = Vec::with_capacity(sets.len());
    for set in sets {
        let r = refs
            .get(&set.question_id)
            .ok_or_else(|| CliError::Validation(format!("no reference set for question `{}`", set.question_id)))?;
        questions.push(ConformalQuestion {
            references: r.references.clone(),
            equivalent_answers: extra.get(&set.question_id).cloned().unwrap_or_default(),
            approx_scores: None,
            candidates: set,
        });
    }

    if admissions.iter().any(|a| matches!(a.kind, AdmissionKind::ApproxScorer { .. })) {
        let spec = opts
            .scorer
            .as_deref()
            .ok_or_else(|| CliError::Usage("admission `scorer` needs --scorer".into()))?;
        let mut scorer = build_scorer(spec, profile, opts.symmetrize.unwrap_or(false))?;
        // ids are "<question_id>#<candidate rank>#<reference index>"
        let mut queries = Vec::new();
        let mut owner = Vec::new();
        for (qi, q) in questions.iter().enumerate() {
            let question = refs[&q.candidates.question_id].question.as_str();
            for (ci, c) in q.candidates.candidates.iter().enumerate() {
                for (ri, r) in q.references.iter().enumerate() {
                    queries.push(ScoreQuery::new(
                        format!("{}#{ci}#{ri}", q.candidates.question_id),
                        question,
                        r,
                        &c.text,
                    ));
                    owner.push((qi, ci));
                }
            }
        }
        let scores = scorer.score_batch(&queries)?;
        for q in questions.iter_mut() {
            q.approx_scores = Some(vec![0.0; q.candidates.len()]);
        }
        for ((qi, ci), s) in owner.into_iter().zip(scores) {
            let slot = &mut questions[qi].approx_scores.as_mut().expect("initialized")[ci];
            *slot = slot.max(s);
        }
    }

    let config = TrialConfig {
        trials: opts.trials.unwrap_or(50),
        calib_fraction: opts.calib_frac.unwrap_or(0.8),
        holdout_fraction: opts.holdout_frac.unwrap_or(0.1),
        gamma: opts.gamma.unwrap_or(0.01),
        seed: opts.seed.expect("seed checked"),
    };
    let exact = Admission::new(AdmissionKind::ExactLabels);
    let exact = Admission { profile, ..exact };

    #[derive(Serialize)]
    struct Row<'a> {
        target_alpha: f64,
        admission: &'a str,
        mean_size: f64,
        p16_size: f64,
        p84_size: f64,
        empirical_accuracy: f64,
    }
    #[derive(Serialize)]
    struct CorrectionRow<'a> {
        admission: &'a str,
        trial: usize,
        accepted: u64,
        false_positives: u64,
        empirical_fpr: f64,
        fpr_upper_bound: f64,
        correction: f64,
    }
    let mut results = Vec::new();
    for a in &admissions {
        results.push(run_trials(&questions, a, &exact, &targets, &config)?);
    }
    let mut rows = Vec::new();
    let mut corrections = Vec::new();
    for r in &results {
        for row in &r.rows {
            rows.push(Row {
                target_alpha: row.target,
                admission: &r.admission,
                mean_size: row.mean_size,
                p16_size: row.p16_size,
                p84_size: row.p84_size,
                empirical_accuracy: row.empirical_accuracy,
            });
        }
        for (trial, c) in r.corrections.iter().enumerate() {
            corrections.push(CorrectionRow {
                admission: &r.admission,
                trial,
                accepted: c.accepted,
                false_positives: c.false_positives,
                empirical_fpr: c.empirical_fpr,
                fpr_upper_bound: c.fpr_upper_bound,
                correction: c.correction,
            });
        }
    }
    out.csv("calibrate.csv", &rows)?;
    if !corrections.is_empty() {
        out.csv("corrections.csv", &corrections)?;
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("{:.2}", r.target_alpha),
                r.admission.to_string(),
                format!("{:.2}", r.mean_size),
                format!("{:.2}-{:.2}", r.p16_size, r.p84_size),
                pct(r.empirical_accuracy),
            ]
        })
        .collect();
    Ok(format!(
        "# Conformal prediction sets ({} questions, {} trials)\n\n{}",
        questions.len(),
        config.trials,
        md_table(&["target", "admission", "mean size", "16-84%", "accuracy (%)"], &table)
    ))
}

fn report(opts: &Options, out: &Outputs) -> Result<String> {
    let examples = load_examples(opts, None)?;
    let agreement = agreement_stats(&examples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.expect("seed checked"));
    let labels = aggregate_examples(&examples, &mut rng)?;
    #[derive(Serialize, Default)]
    struct Rates {
        system: String,
        split: String,
        examples: usize,
        equivalent: usize,
        equivalence_rate: f64,
    }
    let mut groups: BTreeMap<(SourceSystem, Split), (usize, usize)> = BTreeMap::new();
    for (e, l) in examples.iter().zip(&labels) {
        if let Some(l) = l {
            let g = groups.entry((e.source_system, e.split)).or_default();
            g.0 += 1;
            g.1 += usize::from(l.is_equivalent());
        }
    }
    let rates: Vec<Rates> = groups
        .into_iter()
        .map(|((sys, split), (n, eq))| Rates {
            system: sys.to_string(),
            split: split.to_string(),
            examples: n,
            equivalent: eq,
            equivalence_rate: eq as f64 / n as f64,
        })
        .collect();
    out.json("agreement.json", &agreement)?;
    out.csv("equivalence_rates.csv", &rates)?;
    let mut md = format!(
        "# Agreement\n\n{}",
        md_table(
            &["multi-rated", "ratings", "pairwise (%)", "unanimous (%)", "alpha"],
            &[vec![
                agreement.n_multi_rated.to_string(),
                agreement.n_ratings.to_string(),
                pct(agreement.pairwise_agreement),
                pct(agreement.full_agreement_rate),
                format!("{:.4}", agreement.krippendorff_alpha)
            ]]
        )
    );
    let rows: Vec<Vec<String>> = rates
        .iter()
        .map(|r| {
            vec![
                r.system.clone(),
                r.split.clone(),
                r.examples.to_string(),
                pct(r.equivalence_rate),
            ]
        })
        .collect();
    let _ = write!(
        md,
        "\n## Equivalent share by system\n\n{}",
        md_table(&["system", "split", "examples", "equivalent (%)"], &rows)
    );
    Ok(md)
}
