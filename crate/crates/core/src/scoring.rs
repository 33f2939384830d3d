//! Equivalence scorers, thresholded classification, threshold tuning and
//! classifier reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bridge::{BridgeClient, BridgeError, ScoreRequest};
use crate::dataset::SourceSystem;
use crate::lexical::{exact_match_any, token_f1, NormalizationProfile};
use crate::stats::{spearman, StatsError};

/// Suffix appended to an id for the reversed (reference-as-candidate) query
/// issued by a symmetrized scorer.
pub const REVERSED_ID_SUFFIX: &str = "~rev";

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error("no precomputed score for `{0}`")]
    MissingScore(String),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error("scorer returned {score} for `{id}`, outside [0, 1]")]
    OutOfRange { id: String, score: f64 },
    #[error("no labeled examples")]
    Empty,
    #[error("non-finite score in input")]
    NonFinite,
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
}

/// One (candidate, reference, question) triple to score. `id` keys score
/// files and bridge requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreQuery {
    pub id: String,
    pub question: String,
    pub reference: String,
    pub candidate: String,
}

impl ScoreQuery {
    pub fn new(id: impl Into<String>, question: &str, reference: &str, candidate: &str) -> Self {
        Self {
            id: id.into(),
            question: question.to_string(),
            reference: reference.to_string(),
            candidate: candidate.to_string(),
        }
    }

    fn reversed(&self) -> Self {
        Self {
            id: format!("{}{REVERSED_ID_SUFFIX}", self.id),
            question: self.question.clone(),
            reference: self.candidate.clone(),
            candidate: self.reference.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    AsIs,
    /// Mean of the candidate-vs-reference and reference-vs-candidate scores.
    Symmetrized,
}

/// Where scores come from.
pub enum ScorerKind {
    LexicalF1(NormalizationProfile),
    /// 1 for an exact match, else 0.
    ExactMatch(NormalizationProfile),
    /// Precomputed scores keyed by query id.
    ScoreFile(HashMap<String, f64>),
    RemoteBridge(BridgeClient),
}

impl fmt::Debug for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScorerKind::LexicalF1(p) => write!(f, "LexicalF1({p})"),
            ScorerKind::ExactMatch(p) => write!(f, "ExactMatch({p})"),
            ScorerKind::ScoreFile(m) => write!(f, "ScoreFile({} entries)", m.len()),
            ScorerKind::RemoteBridge(c) => write!(f, "RemoteBridge({})", c.name()),
        }
    }
}

/// A scorer mapping answer pairs to [0, 1].
#[derive(Debug)]
pub struct EquivalenceScorer {
    pub kind: ScorerKind,
    pub direction: Direction,
}

impl EquivalenceScorer {
    pub fn new(kind: ScorerKind) -> Self {
        Self {
            kind,
            direction: Direction::AsIs,
        }
    }

    pub fn lexical_f1(profile: NormalizationProfile) -> Self {
        Self::new(ScorerKind::LexicalF1(profile))
    }

    pub fn exact_match(profile: NormalizationProfile) -> Self {
        Self::new(ScorerKind::ExactMatch(profile))
    }

    pub fn symmetrized(mut self) -> Self {
        self.direction = Direction::Symmetrized;
        self
    }

    pub fn name(&self) -> String {
        let base = match &self.kind {
            ScorerKind::LexicalF1(_) => "f1".to_string(),
            ScorerKind::ExactMatch(_) => "em".to_string(),
            ScorerKind::ScoreFile(_) => "file".to_string(),
            ScorerKind::RemoteBridge(_) => "bridge".to_string(),
        };
        match self.direction {
            Direction::AsIs => base,
            Direction::Symmetrized => format!("{base}-symmetrized"),
        }
    }

    pub fn score(&mut self, query: &ScoreQuery) -> Result<f64, ScoringError> {
        Ok(self.score_batch(std::slice::from_ref(query))?[0])
    }

    /// Scores in query order.
    pub fn score_batch(&mut self, queries: &[ScoreQuery]) -> Result<Vec<f64>, ScoringError> {
        match self.direction {
            Direction::AsIs => self.raw_batch(queries),
            Direction::Symmetrized => {
                let mut all: Vec<ScoreQuery> = queries.to_vec();
                all.extend(queries.iter().map(ScoreQuery::reversed));
                let scores = self.raw_batch(&all)?;
                let (fwd, rev) = scores.split_at(queries.len());
                Ok(fwd.iter().zip(rev).map(|(a, b)| 0.5 * (a + b)).collect())
            }
        }
    }

    fn raw_batch(&mut self, queries: &[ScoreQuery]) -> Result<Vec<f64>, ScoringError> {
        let scores = match &mut self.kind {
            ScorerKind::LexicalF1(p) => queries
                .iter()
                .map(|q| token_f1(&q.candidate, &q.reference, *p))
                .collect(),
            ScorerKind::ExactMatch(p) => queries
                .iter()
                .map(|q| f64::from(u8::from(exact_match_any(&q.candidate, [q.reference.as_str()], *p))))
                .collect(),
            ScorerKind::ScoreFile(map) => queries
                .iter()
                .map(|q| map.get(&q.id).copied().ok_or_else(|| ScoringError::MissingScore(q.id.clone())))
                .collect::<Result<Vec<_>, _>>()?,
            ScorerKind::RemoteBridge(client) => {
                let requests: Vec<ScoreRequest> = queries
                    .iter()
                    .map(|q| ScoreRequest {
                        id: q.id.clone(),
                        question: q.question.clone(),
                        reference: q.reference.clone(),
                        candidate: q.candidate.clone(),
                    })
                    .collect();
                client.score(&requests)?
            }
        };
        for (q, &s) in queries.iter().zip(&scores) {
            if !s.is_finite() || !(0.0..=1.0).contains(&s) {
                return Err(ScoringError::OutOfRange { id: q.id.clone(), score: s });
            }
        }
        Ok(scores)
    }
}

/// Predicts `Equivalent` iff score >= threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdedClassifier {
    pub threshold: f64,
}

impl ThresholdedClassifier {
    pub const DEFAULT_THRESHOLD: f64 = 0.5;

    pub fn new(threshold: f64) -> Result<Self, ScoringError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(ScoringError::BadThreshold(threshold));
        }
        Ok(Self { threshold })
    }

    pub fn predict(&self, score: f64) -> bool {
        score >= self.threshold
    }
}

impl Default for ThresholdedClassifier {
    fn default() -> Self {
        Self {
            threshold: Self::DEFAULT_THRESHOLD,
        }
    }
}

/// Accuracy of `score >= threshold` against `labels`.
pub fn accuracy_at(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| (**s >= threshold) == **l)
        .count();
    correct as f64 / scores.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TunedThreshold {
    pub threshold: f64,
    pub accuracy: f64,
}

/// Threshold maximizing accuracy. Candidates are 0, 1 and the midpoints of
/// consecutive distinct scores; the smallest optimal candidate wins.
pub fn tune_threshold(scores: &[f64], labels: &[bool]) -> Result<TunedThreshold, ScoringError> {
    if scores.len() != labels.len() {
        return Err(ScoringError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(ScoringError::Empty);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(ScoringError::NonFinite);
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    // prefix counts of negatives / positives among the i smallest scores
    let mut neg_prefix = Vec::with_capacity(pairs.len() + 1);
    let mut pos_prefix = Vec::with_capacity(pairs.len() + 1);
    neg_prefix.push(0usize);
    pos_prefix.push(0usize);
    for (_, l) in &pairs {
        neg_prefix.push(neg_prefix.last().unwrap() + usize::from(!*l));
        pos_prefix.push(pos_prefix.last().unwrap() + usize::from(*l));
    }
    let total_pos = *pos_prefix.last().unwrap();

    let mut candidates = vec![0.0];
    let mut distinct: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    distinct.dedup();
    candidates.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(1.0);
    candidates.sort_by(f64::total_cmp);

    let n = pairs.len() as f64;
    let mut best = TunedThreshold {
        threshold: candidates[0],
        accuracy: f64::NEG_INFINITY,
    };
    for t in candidates {
        let below = pairs.partition_point(|p| p.0 < t);
        let correct = neg_prefix[below] + (total_pos - pos_prefix[below]);
        let acc = correct as f64 / n;
        if acc > best.accuracy {
            best = TunedThreshold { threshold: t, accuracy: acc };
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub accuracy: f64,
    /// Spearman's rho between raw scores and binary labels; `None` when a
    /// side is constant.
    pub spearman_rho: Option<f64>,
    pub threshold: f64,
    pub n: usize,
}

impl ClassifierReport {
    pub fn rho(&self) -> Result<f64, StatsError> {
        self.spearman_rho.ok_or(StatsError::Constant("scores or labels"))
    }
}

pub fn classifier_report(
    classifier: &ThresholdedClassifier,
    scores: &[f64],
    labels: &[bool],
) -> Result<ClassifierReport, ScoringError> {
    if scores.len() != labels.len() {
        return Err(ScoringError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(ScoringError::Empty);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(ScoringError::NonFinite);
    }
    let label_values: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
    let rho = match spearman(scores, &label_values) {
        Ok(r) => Some(r),
        Err(StatsError::Constant(_)) | Err(StatsError::TooFewPoints(_)) => None,
        Err(_) => return Err(ScoringError::NonFinite),
    };
    Ok(ClassifierReport {
        accuracy: accuracy_at(scores, labels, classifier.threshold),
        spearman_rho: rho,
        threshold: classifier.threshold,
        n: scores.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemAccuracy {
    pub accuracy: f64,
    pub n: usize,
}

/// Accuracy per source system, in system order.
pub fn per_system_accuracy(
    classifier: &ThresholdedClassifier,
    items: &[(SourceSystem, f64, bool)],
) -> Result<BTreeMap<SourceSystem, SystemAccuracy>, ScoringError> {
    if items.is_empty() {
        return Err(ScoringError::Empty);
    }
    let mut groups: BTreeMap<SourceSystem, (usize, usize)> = BTreeMap::new();
    for (sys, score, label) in items {
        let g = groups.entry(*sys).or_default();
        g.0 += usize::from(classifier.predict(*score) == *label);
        g.1 += 1;
    }
    Ok(groups
        .into_iter()
        .map(|(sys, (correct, n))| {
            (
                sys,
                SystemAccuracy {
                    accuracy: correct as f64 / n as f64,
                    n,
                },
            )
        })
        .collect())
}
