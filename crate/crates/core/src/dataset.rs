//! Data model and JSONL I/O for answer-equivalence examples, reference sets,
//! predictions, score files and scored candidate sets.
//!
//! Every file is UTF-8, one JSON object per line. Blank lines are ignored.
//! Line numbers in errors are 1-based.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Upper bound on references per question (SQuAD dev has at most six).
pub const MAX_REFERENCES: usize = 6;

/// Default number of candidates kept per question in a candidate set.
pub const DEFAULT_MAX_CANDIDATES: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}example `{example_id}`: {reason}", location(.path, *.line))]
    Invalid {
        path: Option<PathBuf>,
        line: usize,
        example_id: String,
        reason: String,
    },
    #[error("invalid ingestion adapter: {0}")]
    Adapter(String),
}

fn location(path: &Option<PathBuf>, line: usize) -> String {
    match (path, line) {
        (Some(p), 0) => format!("{}: ", p.display()),
        (Some(p), l) => format!("{}:{l}: ", p.display()),
        (None, 0) => String::new(),
        (None, l) => format!("line {l}: "),
    }
}

impl DatasetError {
    fn invalid(id: impl Into<String>, reason: impl Into<String>) -> Self {
        DatasetError::Invalid {
            path: None,
            line: 0,
            example_id: id.into(),
            reason: reason.into(),
        }
    }

    fn at(self, path: &Path, line_no: usize) -> Self {
        match self {
            DatasetError::Invalid {
                example_id, reason, ..
            } => DatasetError::Invalid {
                path: Some(path.to_path_buf()),
                line: line_no,
                example_id,
                reason,
            },
            other => other,
        }
    }
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourceSystem {
    #[serde(rename = "xlnet", alias = "XLNet")]
    XLNet,
    #[serde(rename = "bidaf", alias = "BiDAF")]
    BiDAF,
    #[serde(rename = "luke", alias = "Luke")]
    Luke,
    #[serde(rename = "albert_train", alias = "AlbertTrain", alias = "albert")]
    AlbertTrain,
    #[serde(rename = "other", alias = "Other")]
    Other,
}

impl fmt::Display for SourceSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceSystem::XLNet => "xlnet",
            SourceSystem::BiDAF => "bidaf",
            SourceSystem::Luke => "luke",
            SourceSystem::AlbertTrain => "albert_train",
            SourceSystem::Other => "other",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[serde(alias = "Train")]
    Train,
    #[serde(alias = "Dev")]
    Dev,
    #[serde(alias = "Test")]
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// One rater's answers to the four rating questions.
///
/// Q1 "completely different?"; Q2 "interchangeable?"; Q3 "removes important
/// information?"; Q4 "adds misleading or superfluous information?". A `yes`
/// on Q1 ends the rating, as does a `yes` on Q2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingVector {
    pub q1_completely_different: bool,
    #[serde(default)]
    pub q2_interchangeable: Option<bool>,
    #[serde(default)]
    pub q3_removes_info: Option<bool>,
    #[serde(default)]
    pub q4_adds_misleading: Option<bool>,
    #[serde(default)]
    pub rater_id: String,
}

impl RatingVector {
    /// Rating that stops at Q1 with `yes`.
    pub fn different(rater: &str) -> Self {
        Self {
            q1_completely_different: true,
            q2_interchangeable: None,
            q3_removes_info: None,
            q4_adds_misleading: None,
            rater_id: rater.to_string(),
        }
    }

    /// Rating that stops at Q2 with `yes`.
    pub fn interchangeable(rater: &str) -> Self {
        Self {
            q1_completely_different: false,
            q2_interchangeable: Some(true),
            q3_removes_info: None,
            q4_adds_misleading: None,
            rater_id: rater.to_string(),
        }
    }

    /// Rating that answers all four questions.
    pub fn degraded(rater: &str, removes_info: bool, adds_misleading: bool) -> Self {
        Self {
            q1_completely_different: false,
            q2_interchangeable: Some(false),
            q3_removes_info: Some(removes_info),
            q4_adds_misleading: Some(adds_misleading),
            rater_id: rater.to_string(),
        }
    }

    /// Check the skip logic of the rating form.
    pub fn check_skip_logic(&self) -> Result<(), String> {
        let later = [
            ("q2", self.q2_interchangeable),
            ("q3", self.q3_removes_info),
            ("q4", self.q4_adds_misleading),
        ];
        if self.q1_completely_different {
            if let Some((name, _)) = later.iter().find(|(_, v)| v.is_some()) {
                return Err(format!("q1=yes ends the rating but {name} is present"));
            }
            return Ok(());
        }
        match self.q2_interchangeable {
            None => Err("q1=no requires q2".to_string()),
            Some(true) => {
                if self.q3_removes_info.is_some() || self.q4_adds_misleading.is_some() {
                    Err("q2=yes ends the rating but q3/q4 are present".to_string())
                } else {
                    Ok(())
                }
            }
            Some(false) => {
                if self.q3_removes_info.is_none() || self.q4_adds_misleading.is_none() {
                    Err("q2=no requires both q3 and q4".to_string())
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// A rated (question, context, reference, candidate) tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AEExample {
    pub example_id: String,
    pub question: String,
    #[serde(default)]
    pub context: String,
    pub reference: String,
    pub candidate: String,
    pub source_system: SourceSystem,
    pub split: Split,
    #[serde(default)]
    pub ratings: Vec<RatingVector>,
}

/// Ordered gold answers for one question. The first entry acts as the
/// single reference in ablations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub question_id: String,
    #[serde(default)]
    pub question: String,
    pub references: Vec<String>,
}

impl ReferenceSet {
    pub fn new(question_id: &str, question: &str, references: Vec<String>) -> Result<Self> {
        let set = Self {
            question_id: question_id.to_string(),
            question: question.to_string(),
            references,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        if self.references.is_empty() {
            return Err(DatasetError::invalid(&self.question_id, "reference set is empty"));
        }
        if self.references.len() > MAX_REFERENCES {
            return Err(DatasetError::invalid(
                &self.question_id,
                format!("{} references (at most {MAX_REFERENCES})", self.references.len()),
            ));
        }
        Ok(())
    }

    /// First `k` references (all of them when `k` exceeds the set size).
    pub fn truncated(&self, k: usize) -> &[String] {
        &self.references[..k.min(self.references.len())]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub text: String,
    pub score: f64,
}

/// A question's ranked candidate answers, scores non-increasing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredCandidateSet {
    pub question_id: String,
    pub candidates: Vec<ScoredCandidate>,
}

impl ScoredCandidateSet {
    /// Dedup by text (max score wins), sort by score descending, keep at
    /// most `max_candidates`. Ties keep first-appearance order.
    pub fn new(
        question_id: &str,
        raw: Vec<ScoredCandidate>,
        max_candidates: Option<usize>,
    ) -> Result<Self> {
        if raw.is_empty() {
            return Err(DatasetError::invalid(question_id, "empty candidate list"));
        }
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut merged: Vec<ScoredCandidate> = Vec::with_capacity(raw.len());
        for c in raw {
            if !c.score.is_finite() {
                return Err(DatasetError::invalid(
                    question_id,
                    format!("non-finite score for candidate `{}`", c.text),
                ));
            }
            match index.get(&c.text) {
                Some(&i) => merged[i].score = merged[i].score.max(c.score),
                None => {
                    index.insert(c.text.clone(), merged.len());
                    merged.push(c);
                }
            }
        }
        merged.sort_by(|a, b| b.score.total_cmp(&a.score));
        if let Some(limit) = max_candidates {
            merged.truncate(limit);
        }
        Ok(Self {
            question_id: question_id.to_string(),
            candidates: merged,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// A system's answer to one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemPrediction {
    pub question_id: String,
    pub answer: String,
}

/// Precomputed scorer output for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub example_id: String,
    pub score: f64,
}

/// Exactly-admissible answers for a question (gold answers plus answers
/// judged equivalent by raters).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmissionLabels {
    pub question_id: String,
    pub admitted_answer_texts: Vec<String>,
}

/// Renames source keys onto the canonical field names before validation,
/// so upstream releases with different column names can be read as-is.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestionAdapter {
    /// canonical example field -> source key
    #[serde(default)]
    pub fields: HashMap<String, String>,
    /// canonical rating field -> source key
    #[serde(default)]
    pub rating_fields: HashMap<String, String>,
    /// source value -> canonical `source_system` value
    #[serde(default)]
    pub systems: HashMap<String, String>,
    /// Split assigned to records without one (e.g. one file per split).
    #[serde(default)]
    pub default_split: Option<Split>,
    /// System assigned to records without one.
    #[serde(default)]
    pub default_system: Option<SourceSystem>,
}

const EXAMPLE_FIELDS: [&str; 8] = [
    "example_id",
    "question",
    "context",
    "reference",
    "candidate",
    "source_system",
    "split",
    "ratings",
];

const RATING_FIELDS: [&str; 5] = [
    "q1_completely_different",
    "q2_interchangeable",
    "q3_removes_info",
    "q4_adds_misleading",
    "rater_id",
];

impl IngestionAdapter {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let adapter: Self =
            toml::from_str(&text).map_err(|e| DatasetError::Adapter(format!("{}: {e}", path.display())))?;
        adapter.check()?;
        Ok(adapter)
    }

    fn check(&self) -> Result<()> {
        for k in self.fields.keys() {
            if !EXAMPLE_FIELDS.contains(&k.as_str()) {
                return Err(DatasetError::Adapter(format!("unknown example field `{k}`")));
            }
        }
        for k in self.rating_fields.keys() {
            if !RATING_FIELDS.contains(&k.as_str()) {
                return Err(DatasetError::Adapter(format!("unknown rating field `{k}`")));
            }
        }
        Ok(())
    }

    fn rename(obj: &mut Map<String, Value>, mapping: &HashMap<String, String>) {
        for (canonical, source) in mapping {
            if canonical != source {
                if let Some(v) = obj.remove(source) {
                    obj.insert(canonical.clone(), v);
                }
            }
        }
    }

    /// Rewrite a raw record into canonical form.
    pub fn apply(&self, mut record: Value) -> Value {
        if let Value::Object(obj) = &mut record {
            Self::rename(obj, &self.fields);
            if let Some(Value::Array(ratings)) = obj.get_mut("ratings") {
                for r in ratings.iter_mut() {
                    if let Value::Object(robj) = r {
                        Self::rename(robj, &self.rating_fields);
                    }
                }
            }
            if let Some(Value::String(sys)) = obj.get("source_system") {
                if let Some(mapped) = self.systems.get(sys) {
                    obj.insert("source_system".into(), Value::String(mapped.clone()));
                }
            }
            if let Some(split) = self.default_split {
                obj.entry("split")
                    .or_insert_with(|| Value::String(split.to_string()));
            }
            if let Some(sys) = self.default_system {
                obj.entry("source_system")
                    .or_insert_with(|| Value::String(sys.to_string()));
            }
        }
        record
    }
}

/// Turn a parsed JSON record into a typed example, checking every invariant.
pub fn validate_example(record: Value) -> Result<AEExample> {
    let id_hint = record
        .get("example_id")
        .and_then(Value::as_str)
        .unwrap_or("<unknown>")
        .to_string();
    let example: AEExample =
        serde_json::from_value(record).map_err(|e| DatasetError::invalid(&id_hint, e.to_string()))?;
    if example.reference.trim().is_empty() {
        return Err(DatasetError::invalid(&example.example_id, "empty reference"));
    }
    if example.candidate.trim().is_empty() {
        return Err(DatasetError::invalid(&example.example_id, "empty candidate"));
    }
    for (i, r) in example.ratings.iter().enumerate() {
        r.check_skip_logic()
            .map_err(|why| DatasetError::invalid(&example.example_id, format!("rating {i}: {why}")))?;
    }
    Ok(example)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Iterate the non-blank lines of a JSONL file as `(line_number, value)`.
fn jsonl_values(path: &Path) -> Result<Vec<(usize, Value)>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| DatasetError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

/// Read a JSONL file of `T` records.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    jsonl_values(path)?
        .into_iter()
        .map(|(line, v)| {
            serde_json::from_value(v).map_err(|source| DatasetError::Json {
                path: path.to_path_buf(),
                line,
                source,
            })
        })
        .collect()
}

/// Write records as JSONL.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| io_err(e.into()))?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Load AE examples, keeping file order. `splits` of `None` keeps all.
pub fn load_ae_examples(path: &Path, splits: Option<&[Split]>) -> Result<Vec<AEExample>> {
    load_ae_examples_with(path, splits, &IngestionAdapter::default())
}

pub fn load_ae_examples_with(
    path: &Path,
    splits: Option<&[Split]>,
    adapter: &IngestionAdapter,
) -> Result<Vec<AEExample>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, value) in jsonl_values(path)? {
        let example = validate_example(adapter.apply(value)).map_err(|e| e.at(path, line))?;
        if !seen.insert(example.example_id.clone()) {
            return Err(DatasetError::invalid(&example.example_id, "duplicate example_id").at(path, line));
        }
        if splits.map_or(true, |s| s.contains(&example.split)) {
            out.push(example);
        }
    }
    Ok(out)
}

pub fn write_ae_examples(path: &Path, examples: &[AEExample]) -> Result<()> {
    write_jsonl(path, examples)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawCandidate {
    Pair(String, f64),
    Object { text: String, score: f64 },
}

#[derive(Deserialize)]
struct RawCandidateSet {
    question_id: String,
    candidates: Vec<RawCandidate>,
}

/// Load candidate sets, keeping the top [`DEFAULT_MAX_CANDIDATES`].
pub fn load_candidate_sets(path: &Path) -> Result<Vec<ScoredCandidateSet>> {
    load_candidate_sets_limited(path, Some(DEFAULT_MAX_CANDIDATES))
}

pub fn load_candidate_sets_limited(path: &Path, max_candidates: Option<usize>) -> Result<Vec<ScoredCandidateSet>> {
    let mut out = Vec::new();
    for (line, value) in jsonl_values(path)? {
        // serde_json rejects NaN literals, so non-finite scores surface here
        // as JSON errors; finite checks below catch overflowing numbers.
        let raw: RawCandidateSet = serde_json::from_value(value).map_err(|source| DatasetError::Json {
            path: path.to_path_buf(),
            line,
            source,
        })?;
        let cands = raw
            .candidates
            .into_iter()
            .map(|c| match c {
                RawCandidate::Pair(text, score) | RawCandidate::Object { text, score } => {
                    ScoredCandidate { text, score }
                }
            })
            .collect();
        out.push(ScoredCandidateSet::new(&raw.question_id, cands, max_candidates).map_err(|e| e.at(path, line))?);
    }
    Ok(out)
}

pub fn load_reference_sets(path: &Path) -> Result<Vec<ReferenceSet>> {
    let sets: Vec<ReferenceSet> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for (i, s) in sets.iter().enumerate() {
        s.validate().map_err(|e| e.at(path, i + 1))?;
        if !seen.insert(s.question_id.as_str()) {
            return Err(DatasetError::invalid(&s.question_id, "duplicate question_id").at(path, i + 1));
        }
    }
    Ok(sets)
}

pub fn load_predictions(path: &Path) -> Result<Vec<SystemPrediction>> {
    let preds: Vec<SystemPrediction> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for (i, p) in preds.iter().enumerate() {
        if !seen.insert(p.question_id.as_str()) {
            return Err(DatasetError::invalid(&p.question_id, "more than one prediction for question").at(path, i + 1));
        }
    }
    Ok(preds)
}

/// Load a score file into an `example_id -> score` map.
pub fn load_score_file(path: &Path) -> Result<HashMap<String, f64>> {
    let records: Vec<ScoreRecord> = read_jsonl(path)?;
    let mut map = HashMap::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        if !r.score.is_finite() || !(0.0..=1.0).contains(&r.score) {
            return Err(DatasetError::invalid(&r.example_id, format!("score {} outside [0, 1]", r.score)).at(path, i + 1));
        }
        map.insert(r.example_id, r.score);
    }
    Ok(map)
}

pub fn load_admission_labels(path: &Path) -> Result<Vec<AdmissionLabels>> {
    read_jsonl(path)
}
