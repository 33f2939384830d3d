//! System-level QA accuracy under interchangeable equivalence functions,
//! bootstrap intervals and reference-count ablations.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::EquivalenceLabel;
use crate::dataset::{AEExample, ReferenceSet, SystemPrediction};
use crate::lexical::{exact_match_any, max_token_f1_any, NormalizationProfile};
use crate::scoring::{EquivalenceScorer, ScoreQuery, ScoringError};
use crate::stats::{mean, quantile_sorted, std_dev};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no reference set for question `{0}`")]
    MissingReferences(String),
    #[error("no predictions to evaluate")]
    Empty,
    #[error("bootstrap needs at least one replicate")]
    NoReplicates,
    #[error("confidence level {0} outside (0, 1)")]
    BadLevel(f64),
    #[error("reference count must be at least 1")]
    ZeroReferences,
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

/// Human equivalence judgments keyed by (question, reference, candidate)
/// text, all trimmed.
#[derive(Debug, Clone, Default)]
pub struct HumanJudgments {
    labels: HashMap<(String, String, String), bool>,
}

impl HumanJudgments {
    /// From examples paired with their aggregated labels; unlabeled
    /// examples are skipped.
    pub fn from_labeled(examples: &[AEExample], labels: &[Option<EquivalenceLabel>]) -> Self {
        let mut out = Self::default();
        for (e, l) in examples.iter().zip(labels) {
            if let Some(l) = l {
                out.insert(&e.question, &e.reference, &e.candidate, l.is_equivalent());
            }
        }
        out
    }

    pub fn insert(&mut self, question: &str, reference: &str, candidate: &str, equivalent: bool) {
        self.labels.insert(key(question, reference, candidate), equivalent);
    }

    pub fn get(&self, question: &str, reference: &str, candidate: &str) -> Option<bool> {
        self.labels.get(&key(question, reference, candidate)).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn key(q: &str, r: &str, c: &str) -> (String, String, String) {
    (q.trim().to_string(), r.trim().to_string(), c.trim().to_string())
}

/// What accepts a non-exact-match prediction against a reference.
pub enum EquivalenceFn<'a> {
    /// Nothing beyond exact match.
    None,
    TokenF1,
    Scorer(&'a mut EquivalenceScorer),
    /// Aggregated human labels; unannotated pairs count as not equivalent.
    Human(&'a HumanJudgments),
}

impl EquivalenceFn<'_> {
    pub fn name(&self) -> String {
        match self {
            EquivalenceFn::None => "em".into(),
            EquivalenceFn::TokenF1 => "f1".into(),
            EquivalenceFn::Scorer(s) => s.name(),
            EquivalenceFn::Human(_) => "human".into(),
        }
    }
}

/// How a per-reference score becomes per-question credit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CreditMode {
    /// Credit 1 when the best score reaches the threshold.
    Thresholded(f64),
    /// Credit equals the best score (the usual "F1" leaderboard number).
    MeanScore,
}

/// Credit in [0, 1] per prediction, using each question's first `k`
/// references (`None` for all). Exact matches always earn 1.
pub fn per_question_credit(
    predictions: &[SystemPrediction],
    references: &HashMap<String, ReferenceSet>,
    equivalence: &mut EquivalenceFn<'_>,
    mode: CreditMode,
    k: Option<usize>,
    profile: NormalizationProfile,
) -> Result<Vec<f64>, EvalError> {
    if k == Some(0) {
        return Err(EvalError::ZeroReferences);
    }
    let mut resolved = Vec::with_capacity(predictions.len());
    for p in predictions {
        let set = references
            .get(&p.question_id)
            .ok_or_else(|| EvalError::MissingReferences(p.question_id.clone()))?;
        let refs = set.truncated(k.unwrap_or(usize::MAX));
        resolved.push((p, set, refs));
    }

    let mut credit: Vec<Option<f64>> = resolved
        .iter()
        .map(|(p, _, refs)| exact_match_any(&p.answer, refs.iter().map(String::as_str), profile).then_some(1.0))
        .collect();

    let best: Vec<f64> = match equivalence {
        EquivalenceFn::None => vec![0.0; resolved.len()],
        EquivalenceFn::TokenF1 => resolved
            .iter()
            .map(|(p, _, refs)| max_token_f1_any(&p.answer, refs.iter().map(String::as_str), profile))
            .collect(),
        EquivalenceFn::Human(h) => resolved
            .iter()
            .map(|(p, set, refs)| {
                let hit = refs.iter().any(|r| h.get(&set.question, r, &p.answer) == Some(true));
                f64::from(u8::from(hit))
            })
            .collect(),
        EquivalenceFn::Scorer(scorer) => {
            // one batch for every non-exact pair; ids are "<question_id>#<ref index>"
            let mut queries = Vec::new();
            let mut owner = Vec::new();
            for (i, (p, set, refs)) in resolved.iter().enumerate() {
                if credit[i].is_some() {
                    continue;
                }
                for (j, r) in refs.iter().enumerate() {
                    queries.push(ScoreQuery::new(format!("{}#{j}", p.question_id), &set.question, r, &p.answer));
                    owner.push(i);
                }
            }
            let scores = scorer.score_batch(&queries)?;
            let mut best = vec![0.0f64; resolved.len()];
            for (i, s) in owner.into_iter().zip(scores) {
                best[i] = best[i].max(s);
            }
            best
        }
    };

    for (c, b) in credit.iter_mut().zip(best) {
        if c.is_none() {
            *c = Some(match mode {
                CreditMode::MeanScore => b,
                CreditMode::Thresholded(t) => f64::from(u8::from(b >= t)),
            });
        }
    }
    Ok(credit.into_iter().map(|c| c.unwrap_or(0.0)).collect())
}

/// Mean credit over all predictions, as a fraction.
pub fn system_accuracy(
    predictions: &[SystemPrediction],
    references: &HashMap<String, ReferenceSet>,
    equivalence: &mut EquivalenceFn<'_>,
    mode: CreditMode,
    profile: NormalizationProfile,
) -> Result<f64, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(mean(&per_question_credit(predictions, references, equivalence, mode, None, profile)?))
}

/// Accuracy with every reference set cut to its first `k` entries.
pub fn reference_ablation(
    predictions: &[SystemPrediction],
    references: &HashMap<String, ReferenceSet>,
    equivalence: &mut EquivalenceFn<'_>,
    mode: CreditMode,
    k: usize,
    profile: NormalizationProfile,
) -> Result<f64, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(mean(&per_question_credit(predictions, references, equivalence, mode, Some(k), profile)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 1000,
            level: 0.95,
        }
    }
}

/// Accuracy with a bootstrap interval. Percentages throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub metric: String,
    pub estimate: f64,
    /// Half the width of the central percentile interval.
    pub ci_half_width: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// Standard deviation of the bootstrap replicates.
    pub std_error: f64,
    pub n_questions: usize,
    pub n_bootstrap: usize,
    pub confidence_level: f64,
}

/// Percentile bootstrap over per-question credit. Each replicate runs on its
/// own stream seeded from `rng`, so the result depends only on `rng`'s state.
pub fn bootstrap_ci<R: Rng + ?Sized>(
    metric: &str,
    credit: &[f64],
    config: BootstrapConfig,
    rng: &mut R,
) -> Result<AccuracyReport, EvalError> {
    if credit.is_empty() {
        return Err(EvalError::Empty);
    }
    if config.replicates == 0 {
        return Err(EvalError::NoReplicates);
    }
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(EvalError::BadLevel(config.level));
    }
    let seeds: Vec<u64> = (0..config.replicates).map(|_| rng.gen()).collect();
    let n = credit.len();
    let mut reps: Vec<f64> = seeds
        .par_iter()
        .map(|&seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let total: f64 = (0..n).map(|_| credit[r.gen_range(0..n)]).sum();
            total / n as f64
        })
        .collect();
    reps.sort_by(f64::total_cmp);
    let tail = (1.0 - config.level) / 2.0;
    let lower = quantile_sorted(&reps, tail);
    let upper = quantile_sorted(&reps, 1.0 - tail);
    Ok(AccuracyReport {
        metric: metric.to_string(),
        estimate: 100.0 * mean(credit),
        ci_half_width: 100.0 * (upper - lower) / 2.0,
        ci_lower: 100.0 * lower,
        ci_upper: 100.0 * upper,
        std_error: 100.0 * std_dev(&reps),
        n_questions: n,
        n_bootstrap: config.replicates,
        confidence_level: config.level,
    })
}

/// [`bootstrap_ci`] over correct/incorrect flags.
pub fn bootstrap_ci_bool<R: Rng + ?Sized>(
    metric: &str,
    correct: &[bool],
    config: BootstrapConfig,
    rng: &mut R,
) -> Result<AccuracyReport, EvalError> {
    let credit: Vec<f64> = correct.iter().map(|&c| f64::from(u8::from(c))).collect();
    bootstrap_ci(metric, &credit, config, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::ScorerKind;
    use proptest::prelude::*;

    const S: NormalizationProfile = NormalizationProfile::SIMPLE;

    fn refs(items: &[(&str, &[&str])]) -> HashMap<String, ReferenceSet> {
        items
            .iter()
            .map(|(id, r)| {
                (
                    id.to_string(),
                    ReferenceSet::new(id, &format!("question {id}"), r.iter().map(|s| s.to_string()).collect()).unwrap(),
                )
            })
            .collect()
    }

    fn preds(items: &[(&str, &str)]) -> Vec<SystemPrediction> {
        items
            .iter()
            .map(|(q, a)| SystemPrediction {
                question_id: q.to_string(),
                answer: a.to_string(),
            })
            .collect()
    }

    #[test]
    fn exact_first_reference_scores_one_everywhere() {
        let r = refs(&[("1", &["rain", "infrequent rain"]), ("2", &["Napoleon's"])]);
        let p = preds(&[("1", "rain"), ("2", "Napoleon's")]);
        let h = HumanJudgments::default();
        let mut scorer = EquivalenceScorer::lexical_f1(S);
        let fns: Vec<EquivalenceFn> = vec![
            EquivalenceFn::None,
            EquivalenceFn::TokenF1,
            EquivalenceFn::Human(&h),
            EquivalenceFn::Scorer(&mut scorer),
        ];
        for mut f in fns {
            for mode in [CreditMode::MeanScore, CreditMode::Thresholded(0.5)] {
                assert_eq!(system_accuracy(&p, &r, &mut f, mode, S).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn modes_and_functions() {
        let r = refs(&[("1", &["infrequent rain"]), ("2", &["secondary school teachers"]), ("3", &["Paris"])]);
        let p = preds(&[("1", "rain"), ("2", "secondary school"), ("3", "London")]);
        let mean_f1 = system_accuracy(&p, &r, &mut EquivalenceFn::TokenF1, CreditMode::MeanScore, S).unwrap();
        assert!((mean_f1 - (2.0 / 3.0 + 0.8) / 3.0).abs() < 1e-12);
        let thr = system_accuracy(&p, &r, &mut EquivalenceFn::TokenF1, CreditMode::Thresholded(0.7), S).unwrap();
        assert!((thr - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(system_accuracy(&p, &r, &mut EquivalenceFn::None, CreditMode::MeanScore, S).unwrap(), 0.0);

        let mut h = HumanJudgments::default();
        h.insert("question 2", "secondary school teachers", "secondary school", true);
        h.insert("question 1", "infrequent rain", "rain", false);
        let human = system_accuracy(&p, &r, &mut EquivalenceFn::Human(&h), CreditMode::Thresholded(0.5), S).unwrap();
        assert!((human - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn scorer_queries_are_keyed_by_question_and_reference() {
        let r = refs(&[("q1", &["a", "b"])]);
        let p = preds(&[("q1", "c")]);
        let map: HashMap<String, f64> = [("q1#0".to_string(), 0.2), ("q1#1".to_string(), 0.7)].into();
        let mut sc = EquivalenceScorer::new(ScorerKind::ScoreFile(map));
        let mut f = EquivalenceFn::Scorer(&mut sc);
        assert_eq!(system_accuracy(&p, &r, &mut f, CreditMode::Thresholded(0.5), S).unwrap(), 1.0);
        assert_eq!(reference_ablation(&p, &r, &mut f, CreditMode::Thresholded(0.5), 1, S).unwrap(), 0.0);
    }

    #[test]
    fn missing_reference_set_is_an_error() {
        let r = refs(&[("1", &["a"])]);
        let p = preds(&[("2", "a")]);
        assert!(matches!(
            system_accuracy(&p, &r, &mut EquivalenceFn::None, CreditMode::MeanScore, S),
            Err(EvalError::MissingReferences(q)) if q == "2"
        ));
    }

    #[test]
    fn ablation_with_large_k_equals_full() {
        let r = refs(&[("1", &["x", "rain"]), ("2", &["a b", "a", "c"])]);
        let p = preds(&[("1", "rain"), ("2", "a")]);
        let full = system_accuracy(&p, &r, &mut EquivalenceFn::TokenF1, CreditMode::MeanScore, S).unwrap();
        let big = reference_ablation(&p, &r, &mut EquivalenceFn::TokenF1, CreditMode::MeanScore, 100, S).unwrap();
        assert_eq!(full, big);
        let one = reference_ablation(&p, &r, &mut EquivalenceFn::TokenF1, CreditMode::MeanScore, 1, S).unwrap();
        assert!(one < full);
    }

    #[test]
    fn bootstrap_degenerate_and_seeded() {
        let all = vec![true; 50];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for b in [1, 10, 200] {
            let r = bootstrap_ci_bool("em", &all, BootstrapConfig { replicates: b, level: 0.95 }, &mut rng).unwrap();
            assert_eq!((r.estimate, r.ci_half_width), (100.0, 0.0));
        }
        let data: Vec<bool> = (0..300).map(|i| i % 3 != 0).collect();
        let a = bootstrap_ci_bool("em", &data, BootstrapConfig::default(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = bootstrap_ci_bool("em", &data, BootstrapConfig::default(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(bootstrap_ci_bool("em", &[], BootstrapConfig::default(), &mut rng).is_err());
        assert!(bootstrap_ci_bool("em", &data, BootstrapConfig { replicates: 0, level: 0.9 }, &mut rng).is_err());
    }

    #[test]
    fn bootstrap_width_matches_normal_approximation() {
        // 8,976 of 10,000 correct: 1.96 * sqrt(p(1-p)/n) * 100 ~= 0.594
        let data: Vec<bool> = (0..10_000).map(|i| i < 8_976).collect();
        let r = bootstrap_ci_bool("em", &data, BootstrapConfig::default(), &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        let p: f64 = 0.8976;
        let normal = 1.96 * (p * (1.0 - p) / 10_000.0).sqrt() * 100.0;
        assert!((0.45..=0.75).contains(&r.ci_half_width), "{}", r.ci_half_width);
        assert!((r.ci_half_width - normal).abs() < 0.08);
        assert!((r.estimate - 89.76).abs() < 1e-9);
    }

    #[test]
    fn bootstrap_width_shrinks_with_n() {
        let small: Vec<bool> = (0..100).map(|i| i % 10 != 0).collect();
        let large: Vec<bool> = (0..10_000).map(|i| i % 10 != 0).collect();
        let a = bootstrap_ci_bool("x", &small, BootstrapConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = bootstrap_ci_bool("x", &large, BootstrapConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(b.ci_half_width < a.ci_half_width / 5.0);
    }

    proptest! {
        #[test]
        fn monotone_in_reference_count(
            sets in prop::collection::vec((prop::collection::vec("[a-d]( [a-d]){0,2}", 1..=6), "[a-d]( [a-d]){0,2}"), 1..8),
            k in 1usize..6,
        ) {
            let r: HashMap<String, ReferenceSet> = sets.iter().enumerate()
                .map(|(i, (rs, _))| (i.to_string(), ReferenceSet::new(&i.to_string(), "", rs.clone()).unwrap()))
                .collect();
            let p: Vec<SystemPrediction> = sets.iter().enumerate()
                .map(|(i, (_, a))| SystemPrediction { question_id: i.to_string(), answer: a.clone() })
                .collect();
            for mode in [CreditMode::MeanScore, CreditMode::Thresholded(0.5)] {
                let lo = reference_ablation(&p, &r, &mut EquivalenceFn::TokenF1, mode, k, S).unwrap();
                let hi = reference_ablation(&p, &r, &mut EquivalenceFn::TokenF1, mode, k + 1, S).unwrap();
                prop_assert!(hi >= lo);
            }
            let em = system_accuracy(&p, &r, &mut EquivalenceFn::None, CreditMode::Thresholded(0.5), S).unwrap();
            let f1 = system_accuracy(&p, &r, &mut EquivalenceFn::TokenF1, CreditMode::Thresholded(0.5), S).unwrap();
            prop_assert!(em <= f1 && f1 <= 1.0);
        }
    }
}
