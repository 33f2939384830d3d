//! Split conformal prediction sets with expanded admission.
//!
//! Each question carries a ranked candidate list. The nonconformity of a
//! candidate is its negated model score. A calibration question contributes
//! the smallest nonconformity among the candidates its admission function
//! accepts (`+inf` when it accepts none). A test candidate with nonconformity
//! `s` gets the p-value
//!
//! ```text
//! p(s) = (1 + #{i : cal_i >= s}) / (n + 1)
//! ```
//!
//! and enters the prediction set for target accuracy `alpha` iff
//! `p(s) / tau > 1 - alpha`, where `tau` is 1 for exact admission and the
//! lower-bounded precision of an approximate admission function otherwise.
//! The set then holds an exactly admissible answer with probability at
//! least `alpha`, marginally over questions.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ScoredCandidateSet;
use crate::lexical::{exact_match_any, max_token_f1_any, NormalizationProfile};
use crate::stats::{clopper_pearson_upper, mean, quantile_sorted, StatsError};

/// Slack in the set-inclusion comparison so decimal targets such as 0.9
/// behave as their decimal value rather than the nearest binary float.
const INCLUSION_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConformalError {
    #[error("non-finite model score {0}")]
    NonFinite(f64),
    #[error("calibration model has no scores")]
    EmptyCalibration,
    #[error("target accuracy {0} outside (0, 1)")]
    BadTarget(f64),
    #[error("correction factor {0} must lie in (0, 1]")]
    BadCorrection(f64),
    #[error("approximate admission accepted no top-ranked answer in the holdout; cannot estimate its error rate")]
    NoAcceptedTop,
    #[error("holdout is empty")]
    EmptyHoldout,
    #[error("need at least 2 questions, got {0}")]
    TooFewQuestions(usize),
    #[error("{0} partition is empty")]
    EmptyPartition(&'static str),
    #[error("question `{0}` has no approximate scores for its candidates")]
    MissingApproxScores(String),
    #[error("question `{0}`: {1} admission flags for {2} candidates")]
    MaskLength(String, usize, usize),
    #[error("fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

pub type Result<T, E = ConformalError> = std::result::Result<T, E>;

/// Negated model score; lower is more conforming.
pub fn nonconformity(score: f64) -> Result<f64> {
    if !score.is_finite() {
        return Err(ConformalError::NonFinite(score));
    }
    Ok(-score)
}

/// Which candidates count as correct for calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AdmissionKind {
    /// Exact match against the gold references, or one of the human-judged
    /// equivalent answers.
    ExactLabels,
    /// Exact match against the gold references only.
    SquadOnly,
    /// Max Token F1 against the references at least `threshold`.
    ApproxF1 { threshold: f64 },
    /// Precomputed equivalence-scorer output at least `threshold`.
    ApproxScorer { threshold: f64 },
}

impl AdmissionKind {
    pub fn is_approximate(&self) -> bool {
        matches!(self, AdmissionKind::ApproxF1 { .. } | AdmissionKind::ApproxScorer { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdmissionKind::ExactLabels => "ae",
            AdmissionKind::SquadOnly => "squad",
            AdmissionKind::ApproxF1 { .. } => "f1",
            AdmissionKind::ApproxScorer { .. } => "scorer",
        }
    }
}

impl fmt::Display for AdmissionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A question prepared for conformal calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConformalQuestion {
    pub candidates: ScoredCandidateSet,
    /// Gold answers.
    pub references: Vec<String>,
    /// Further answers judged equivalent by raters.
    pub equivalent_answers: Vec<String>,
    /// Scorer output per candidate (aligned with `candidates`), used by
    /// [`AdmissionKind::ApproxScorer`].
    pub approx_scores: Option<Vec<f64>>,
}

/// An admission function: kind plus the normalization used for matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Admission {
    pub kind: AdmissionKind,
    pub profile: NormalizationProfile,
}

impl Admission {
    pub fn new(kind: AdmissionKind) -> Self {
        Self {
            kind,
            profile: NormalizationProfile::SIMPLE,
        }
    }

    /// Admission flag per candidate.
    pub fn admitted(&self, q: &ConformalQuestion) -> Result<Vec<bool>> {
        let refs = || q.references.iter().map(String::as_str);
        let flags = match self.kind {
            AdmissionKind::SquadOnly => q
                .candidates
                .candidates
                .iter()
                .map(|c| exact_match_any(&c.text, refs(), self.profile))
                .collect(),
            AdmissionKind::ExactLabels => q
                .candidates
                .candidates
                .iter()
                .map(|c| exact_match_any(&c.text, refs().chain(q.equivalent_answers.iter().map(String::as_str)), self.profile))
                .collect(),
            AdmissionKind::ApproxF1 { threshold } => q
                .candidates
                .candidates
                .iter()
                .map(|c| max_token_f1_any(&c.text, refs(), self.profile) >= threshold)
                .collect(),
            AdmissionKind::ApproxScorer { threshold } => {
                let scores = q
                    .approx_scores
                    .as_ref()
                    .ok_or_else(|| ConformalError::MissingApproxScores(q.candidates.question_id.clone()))?;
                if scores.len() != q.candidates.len() {
                    return Err(ConformalError::MaskLength(
                        q.candidates.question_id.clone(),
                        scores.len(),
                        q.candidates.len(),
                    ));
                }
                scores.iter().map(|&s| s >= threshold).collect()
            }
        };
        Ok(flags)
    }
}

/// Smallest nonconformity over admitted candidates, `+inf` if none.
pub fn calibration_score(candidates: &ScoredCandidateSet, admitted: &[bool]) -> Result<f64> {
    if admitted.len() != candidates.len() {
        return Err(ConformalError::MaskLength(
            candidates.question_id.clone(),
            admitted.len(),
            candidates.len(),
        ));
    }
    let mut best = f64::INFINITY;
    for (c, &ok) in candidates.candidates.iter().zip(admitted) {
        if ok {
            best = best.min(nonconformity(c.score)?);
        }
    }
    Ok(best)
}

/// Conformal p-value of nonconformity `s` against calibration scores sorted
/// ascending. Ties count toward the tail.
pub fn p_value(s: f64, sorted_calibration: &[f64]) -> f64 {
    let n = sorted_calibration.len();
    let below = sorted_calibration.partition_point(|&c| c < s);
    (1 + n - below) as f64 / (n + 1) as f64
}

/// Sorted calibration scores plus the approximate-admission correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    scores: Vec<f64>,
    correction: f64,
}

impl CalibrationModel {
    /// Exact-admission model (`tau = 1`).
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        Self::with_correction(scores, 1.0)
    }

    pub fn with_correction(mut scores: Vec<f64>, correction: f64) -> Result<Self> {
        if scores.iter().any(|s| s.is_nan()) {
            return Err(ConformalError::NonFinite(f64::NAN));
        }
        if !(correction > 0.0 && correction <= 1.0) {
            return Err(ConformalError::BadCorrection(correction));
        }
        scores.sort_by(f64::total_cmp);
        Ok(Self { scores, correction })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn n(&self) -> usize {
        self.scores.len()
    }

    pub fn correction(&self) -> f64 {
        self.correction
    }

    pub fn p_value(&self, s: f64) -> f64 {
        p_value(s, &self.scores)
    }

    /// Whether a candidate with model score `score` enters the set for
    /// target accuracy `target`.
    pub fn includes(&self, score: f64, target: f64) -> Result<bool> {
        if !(target > 0.0 && target < 1.0) {
            return Err(ConformalError::BadTarget(target));
        }
        if self.scores.is_empty() {
            return Err(ConformalError::EmptyCalibration);
        }
        let p = self.p_value(nonconformity(score)?) / self.correction;
        Ok(p - (1.0 - target) > INCLUSION_EPS)
    }

    /// Indices (in rank order) of the candidates in the prediction set.
    pub fn predict_indices(&self, set: &ScoredCandidateSet, target: f64) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for (i, c) in set.candidates.iter().enumerate() {
            if self.includes(c.score, target)? {
                out.push(i);
            }
        }
        Ok(out)
    }
}

/// Answer texts in the prediction set for target accuracy `target`.
pub fn predict_set<'a>(set: &'a ScoredCandidateSet, model: &CalibrationModel, target: f64) -> Result<Vec<&'a str>> {
    Ok(model
        .predict_indices(set, target)?
        .into_iter()
        .map(|i| set.candidates[i].text.as_str())
        .collect())
}

/// Empirical error rate of an approximate admission function on its
/// top-ranked acceptances and the derived correction factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionEstimate {
    /// Holdout questions whose top answer the approximate function accepted.
    pub accepted: u64,
    /// Of those, how many the exact function rejects.
    pub false_positives: u64,
    pub empirical_fpr: f64,
    /// One-sided Clopper-Pearson upper bound at confidence 1 - gamma.
    pub fpr_upper_bound: f64,
    /// 1 - fpr_upper_bound; p-values are divided by this.
    pub correction: f64,
    pub gamma: f64,
}

/// Estimate the correction from holdout questions, given per-question
/// admission flags of the approximate and the exact function.
pub fn estimate_correction(approx: &[&[bool]], exact: &[&[bool]], gamma: f64) -> Result<CorrectionEstimate> {
    if approx.is_empty() {
        return Err(ConformalError::EmptyHoldout);
    }
    let mut accepted = 0u64;
    let mut wrong = 0u64;
    for (a, e) in approx.iter().zip(exact) {
        if a.first().copied().unwrap_or(false) {
            accepted += 1;
            if !e.first().copied().unwrap_or(false) {
                wrong += 1;
            }
        }
    }
    if accepted == 0 {
        return Err(ConformalError::NoAcceptedTop);
    }
    let upper = clopper_pearson_upper(wrong, accepted, gamma)?;
    Ok(CorrectionEstimate {
        accepted,
        false_positives: wrong,
        empirical_fpr: wrong as f64 / accepted as f64,
        fpr_upper_bound: upper,
        correction: 1.0 - upper,
        gamma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub trials: usize,
    /// Share of questions used for calibration; the rest are test questions.
    pub calib_fraction: f64,
    /// Share of the calibration split held out to estimate the correction
    /// (approximate admission only).
    pub holdout_fraction: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl TrialConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            trials: 50,
            calib_fraction: 0.8,
            holdout_fraction: 0.1,
            gamma: 0.01,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub target: f64,
    /// Mean over trials of the per-trial mean set size.
    pub mean_size: f64,
    pub p16_size: f64,
    pub p84_size: f64,
    /// Mean over trials of the share of test sets holding an exactly
    /// admissible answer.
    pub empirical_accuracy: f64,
    pub min_trial_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub admission: String,
    pub n_trials: usize,
    pub n_calibration: usize,
    pub n_test: usize,
    pub rows: Vec<CalibrationRow>,
    /// One entry per trial for approximate admission, empty otherwise.
    pub corrections: Vec<CorrectionEstimate>,
}

/// Per-trial outcome: (mean size, accuracy) per target plus the correction.
struct TrialOutcome {
    per_target: Vec<(f64, f64)>,
    correction: Option<CorrectionEstimate>,
}

/// Random split sizes for `n` questions.
fn split_sizes(n: usize, config: &TrialConfig, approximate: bool) -> Result<(usize, usize)> {
    let n_cal = (config.calib_fraction * n as f64).round() as usize;
    if n_cal == 0 {
        return Err(ConformalError::EmptyPartition("calibration"));
    }
    if n_cal >= n {
        return Err(ConformalError::EmptyPartition("test"));
    }
    let n_hold = if approximate {
        let h = ((config.holdout_fraction * n_cal as f64).round() as usize).max(1);
        if h >= n_cal {
            return Err(ConformalError::EmptyPartition("calibration (after holdout)"));
        }
        h
    } else {
        0
    };
    Ok((n_cal, n_hold))
}

/// Run repeated random calibration/test partitions.
///
/// `calibration_admission` calibrates; coverage is always judged with
/// `exact_admission`. Trials run in parallel; trial `t` shuffles with a
/// ChaCha stream `t` keyed by the seed, so results depend only on the seed.
pub fn run_trials(
    questions: &[ConformalQuestion],
    calibration_admission: &Admission,
    exact_admission: &Admission,
    targets: &[f64],
    config: &TrialConfig,
) -> Result<CalibrationResult> {
    let n = questions.len();
    if n < 2 {
        return Err(ConformalError::TooFewQuestions(n));
    }
    for &t in targets {
        if !(t > 0.0 && t < 1.0) {
            return Err(ConformalError::BadTarget(t));
        }
    }
    for f in [config.calib_fraction, config.holdout_fraction] {
        if !(f > 0.0 && f < 1.0) {
            return Err(ConformalError::BadFraction(f));
        }
    }
    let approximate = calibration_admission.kind.is_approximate();
    let (n_cal, n_hold) = split_sizes(n, config, approximate)?;

    let cal_masks: Vec<Vec<bool>> = questions
        .iter()
        .map(|q| calibration_admission.admitted(q))
        .collect::<Result<_>>()?;
    let exact_masks: Vec<Vec<bool>> = questions
        .iter()
        .map(|q| exact_admission.admitted(q))
        .collect::<Result<_>>()?;
    let cal_scores: Vec<f64> = questions
        .iter()
        .zip(&cal_masks)
        .map(|(q, m)| calibration_score(&q.candidates, m))
        .collect::<Result<_>>()?;

    let outcomes: Vec<TrialOutcome> = (0..config.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(trial as u64);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let (calibration, test) = order.split_at(n_cal);
            let (holdout, fit) = calibration.split_at(n_hold);

            let correction = if approximate {
                let a: Vec<&[bool]> = holdout.iter().map(|&i| cal_masks[i].as_slice()).collect();
                let e: Vec<&[bool]> = holdout.iter().map(|&i| exact_masks[i].as_slice()).collect();
                Some(estimate_correction(&a, &e, config.gamma)?)
            } else {
                None
            };
            let tau = correction.as_ref().map_or(1.0, |c| c.correction);
            let model = CalibrationModel::with_correction(fit.iter().map(|&i| cal_scores[i]).collect(), tau)?;

            let mut per_target = Vec::with_capacity(targets.len());
            for &target in targets {
                let mut size = 0usize;
                let mut covered = 0usize;
                for &i in test {
                    let set = model.predict_indices(&questions[i].candidates, target)?;
                    size += set.len();
                    covered += usize::from(set.iter().any(|&j| exact_masks[i][j]));
                }
                per_target.push((size as f64 / test.len() as f64, covered as f64 / test.len() as f64));
            }
            Ok(TrialOutcome { per_target, correction })
        })
        .collect::<Result<_>>()?;

    let rows = targets
        .iter()
        .enumerate()
        .map(|(k, &target)| {
            let mut sizes: Vec<f64> = outcomes.iter().map(|o| o.per_target[k].0).collect();
            let accs: Vec<f64> = outcomes.iter().map(|o| o.per_target[k].1).collect();
            let mean_size = mean(&sizes);
            sizes.sort_by(f64::total_cmp);
            CalibrationRow {
                target,
                mean_size,
                p16_size: quantile_sorted(&sizes, 0.16),
                p84_size: quantile_sorted(&sizes, 0.84),
                empirical_accuracy: mean(&accs),
                min_trial_accuracy: accs.iter().copied().fold(f64::INFINITY, f64::min),
            }
        })
        .collect();

    Ok(CalibrationResult {
        admission: calibration_admission.kind.name().to_string(),
        n_trials: config.trials,
        n_calibration: n_cal - n_hold,
        n_test: n - n_cal,
        rows,
        corrections: outcomes.into_iter().filter_map(|o| o.correction).collect(),
    })
}

/// Exchangeable synthetic questions for exercising the calibration loop.
pub mod synthetic {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::ConformalQuestion;
    use crate::dataset::{ScoredCandidate, ScoredCandidateSet};

    /// Shape of the generated data.
    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct SyntheticSpec {
        pub questions: usize,
        pub candidates: usize,
        /// Probability that the gold answer is missing from the candidates.
        pub miss_rate: f64,
        /// Probability that a non-gold candidate is judged equivalent.
        pub equivalent_rate: f64,
        /// Probability that the approximate scorer flips its verdict.
        pub scorer_noise: f64,
    }

    impl Default for SyntheticSpec {
        fn default() -> Self {
            Self {
                questions: 1000,
                candidates: 20,
                miss_rate: 0.05,
                equivalent_rate: 0.2,
                scorer_noise: 0.1,
            }
        }
    }

    /// Candidate scores are a softmax over Gaussian logits. The gold answer
    /// is drawn in proportion to the scores; further candidates are
    /// equivalent at `equivalent_rate`. Approximate scores are high for
    /// admissible candidates, with verdicts flipped at `scorer_noise`.
    pub fn generate(spec: &SyntheticSpec, seed: u64) -> Vec<ConformalQuestion> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logit = Normal::new(0.0, 2.0).expect("valid normal");
        (0..spec.questions)
            .map(|qi| {
                let logits: Vec<f64> = (0..spec.candidates).map(|_| logit.sample(&mut rng)).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
                probs.sort_by(|a, b| b.total_cmp(a));

                let gold = if rng.gen_bool(spec.miss_rate) {
                    None
                } else {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut pick = probs.len() - 1;
                    for (j, p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            pick = j;
                            break;
                        }
                    }
                    Some(pick)
                };
                let texts: Vec<String> = (0..spec.candidates).map(|j| format!("q{qi} answer {j}")).collect();
                let mut equivalent = Vec::new();
                let mut admissible = vec![false; spec.candidates];
                for j in 0..spec.candidates {
                    if Some(j) == gold {
                        admissible[j] = true;
                    } else if rng.gen_bool(spec.equivalent_rate) {
                        admissible[j] = true;
                        equivalent.push(texts[j].clone());
                    }
                }
                let approx: Vec<f64> = admissible
                    .iter()
                    .map(|&ok| {
                        let verdict = ok ^ rng.gen_bool(spec.scorer_noise);
                        let jitter: f64 = rng.gen_range(0.0..0.4);
                        if verdict {
                            0.6 + jitter
                        } else {
                            jitter
                        }
                    })
                    .collect();
                let candidates = texts
                    .iter()
                    .zip(&probs)
                    .map(|(t, &p)| ScoredCandidate { text: t.clone(), score: p })
                    .collect();
                ConformalQuestion {
                    candidates: ScoredCandidateSet::new(&format!("q{qi}"), candidates, None)
                        .expect("synthetic candidates are valid"),
                    references: match gold {
                        Some(g) => vec![texts[g].clone()],
                        // an unreachable gold answer
                        None => vec![format!("q{qi} unlisted gold")],
                    },
                    equivalent_answers: equivalent,
                    approx_scores: Some(approx),
                }
            })
            .collect()
    }
}
