//! Equivalence labels derived from rating vectors, majority aggregation,
//! inter-rater agreement and the F1-vs-label histogram.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AEExample, RatingVector};
use crate::lexical::{token_f1, NormalizationProfile};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnnotationError {
    #[error("rating violates the rating-form skip logic: {0}")]
    SkipLogic(String),
    #[error("cannot aggregate an empty rating list")]
    NoRatings,
    #[error("no example carries two or more ratings")]
    NoMultiRated,
    #[error("bin count must be at least 1")]
    NoBins,
}

/// Outcome of a rating. Only `Equivalent` projects to `true`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquivalenceLabel {
    Equivalent,
    /// Q1 answered `yes`: a completely different answer.
    NotEquivalentDifferent,
    /// Not different, but removes relevant information or adds misleading
    /// or superfluous information.
    NotEquivalentDegraded,
}

impl EquivalenceLabel {
    pub fn is_equivalent(self) -> bool {
        self == EquivalenceLabel::Equivalent
    }
}

impl fmt::Display for EquivalenceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EquivalenceLabel::Equivalent => "equivalent",
            EquivalenceLabel::NotEquivalentDifferent => "different",
            EquivalenceLabel::NotEquivalentDegraded => "degraded",
        })
    }
}

pub fn derive_label(rating: &RatingVector) -> Result<EquivalenceLabel, AnnotationError> {
    rating.check_skip_logic().map_err(AnnotationError::SkipLogic)?;
    Ok(if rating.q1_completely_different {
        EquivalenceLabel::NotEquivalentDifferent
    } else if rating.q2_interchangeable == Some(true) {
        EquivalenceLabel::Equivalent
    } else {
        EquivalenceLabel::NotEquivalentDegraded
    })
}

/// Majority vote over the binary projection. An exact tie consumes one
/// draw from `rng`; no draw happens otherwise. A non-equivalent outcome
/// carries the majority subclass, ties going to `NotEquivalentDifferent`.
pub fn aggregate<R: Rng + ?Sized>(ratings: &[RatingVector], rng: &mut R) -> Result<EquivalenceLabel, AnnotationError> {
    if ratings.is_empty() {
        return Err(AnnotationError::NoRatings);
    }
    let labels = ratings.iter().map(derive_label).collect::<Result<Vec<_>, _>>()?;
    let eq = labels.iter().filter(|l| l.is_equivalent()).count();
    let different = labels
        .iter()
        .filter(|l| **l == EquivalenceLabel::NotEquivalentDifferent)
        .count();
    let not_eq = labels.len() - eq;
    let equivalent_wins = match eq.cmp(&not_eq) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => rng.gen_bool(0.5),
    };
    Ok(if equivalent_wins {
        EquivalenceLabel::Equivalent
    } else if different >= not_eq - different {
        EquivalenceLabel::NotEquivalentDifferent
    } else {
        EquivalenceLabel::NotEquivalentDegraded
    })
}

/// Aggregate every example in order, drawing tie-breaks from one stream.
/// Examples without ratings yield `None`.
pub fn aggregate_examples<R: Rng + ?Sized>(
    examples: &[AEExample],
    rng: &mut R,
) -> Result<Vec<Option<EquivalenceLabel>>, AnnotationError> {
    examples
        .iter()
        .map(|e| {
            if e.ratings.is_empty() {
                Ok(None)
            } else {
                aggregate(&e.ratings, rng).map(Some)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Probability that two ratings of the same example agree, taken over
    /// all unordered same-example rating pairs.
    pub pairwise_agreement: f64,
    /// Fraction of multi-rated examples whose ratings are unanimous.
    pub full_agreement_rate: f64,
    /// Nominal Krippendorff's alpha on the binary label.
    pub krippendorff_alpha: f64,
    pub n_multi_rated: usize,
    pub n_ratings: usize,
}

/// Agreement over examples with at least two ratings; singletons are
/// excluded from every statistic.
pub fn agreement_stats(examples: &[AEExample]) -> Result<AgreementReport, AnnotationError> {
    let mut units: Vec<[usize; 2]> = Vec::new();
    for e in examples.iter().filter(|e| e.ratings.len() >= 2) {
        let mut counts = [0usize; 2];
        for r in &e.ratings {
            counts[usize::from(derive_label(r)?.is_equivalent())] += 1;
        }
        units.push(counts);
    }
    if units.is_empty() {
        return Err(AnnotationError::NoMultiRated);
    }

    let mut agreeing_pairs = 0u64;
    let mut total_pairs = 0u64;
    let mut unanimous = 0usize;
    let mut n_ratings = 0usize;
    for [neg, pos] in &units {
        let (neg, pos) = (*neg as u64, *pos as u64);
        let m = neg + pos;
        agreeing_pairs += neg * neg.saturating_sub(1) / 2 + pos * pos.saturating_sub(1) / 2;
        total_pairs += m * (m - 1) / 2;
        if neg == 0 || pos == 0 {
            unanimous += 1;
        }
        n_ratings += m as usize;
    }

    Ok(AgreementReport {
        pairwise_agreement: agreeing_pairs as f64 / total_pairs as f64,
        full_agreement_rate: unanimous as f64 / units.len() as f64,
        krippendorff_alpha: nominal_alpha(&units),
        n_multi_rated: units.len(),
        n_ratings,
    })
}

/// Nominal alpha from per-unit value counts (every unit pairable).
///
/// alpha = 1 - (n - 1) * sum_u [ sum_{c != k} n_uc n_uk / (m_u - 1) ] / sum_{c != k} n_c n_k.
/// When every pairable value is identical the expected disagreement is
/// zero and alpha is reported as 1.
pub fn nominal_alpha<const K: usize>(units: &[[usize; K]]) -> f64 {
    let mut totals = [0f64; K];
    let mut observed = 0f64;
    for unit in units {
        let m: usize = unit.iter().sum();
        if m < 2 {
            continue;
        }
        let same: f64 = unit.iter().map(|&c| (c * c) as f64).sum();
        // sum over ordered pairs of distinct values = m^2 - sum c^2
        observed += ((m * m) as f64 - same) / (m - 1) as f64;
        for (t, &c) in totals.iter_mut().zip(unit) {
            *t += c as f64;
        }
    }
    let n: f64 = totals.iter().sum();
    let expected = n * n - totals.iter().map(|t| t * t).sum::<f64>();
    if expected == 0.0 {
        return 1.0;
    }
    1.0 - (n - 1.0) * observed / expected
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub f1_lower: f64,
    pub f1_upper: f64,
    pub equivalent: usize,
    pub different: usize,
    pub degraded: usize,
}

impl HistogramBin {
    pub fn total(&self) -> usize {
        self.equivalent + self.different + self.degraded
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub bins: Vec<HistogramBin>,
}

pub const DEFAULT_BIN_COUNT: usize = 10;

/// Bin index for a value in [0, 1]: half-open bins, last bin closed.
pub fn bin_index(value: f64, bin_count: usize) -> usize {
    let mut i = ((value * bin_count as f64).floor() as usize).min(bin_count - 1);
    // guard against rounding in the product
    while i > 0 && value < i as f64 / bin_count as f64 {
        i -= 1;
    }
    while i + 1 < bin_count && value >= (i + 1) as f64 / bin_count as f64 {
        i += 1;
    }
    i
}

/// Histogram of reference/candidate Token F1, split by aggregated label.
pub fn f1_histogram(
    items: &[(&AEExample, EquivalenceLabel)],
    bin_count: usize,
    profile: NormalizationProfile,
) -> Result<HistogramReport, AnnotationError> {
    if bin_count < 1 {
        return Err(AnnotationError::NoBins);
    }
    let mut bins: Vec<HistogramBin> = (0..bin_count)
        .map(|i| HistogramBin {
            f1_lower: i as f64 / bin_count as f64,
            f1_upper: (i + 1) as f64 / bin_count as f64,
            equivalent: 0,
            different: 0,
            degraded: 0,
        })
        .collect();
    for (example, label) in items {
        let f1 = token_f1(&example.candidate, &example.reference, profile);
        let bin = &mut bins[bin_index(f1, bin_count)];
        match label {
            EquivalenceLabel::Equivalent => bin.equivalent += 1,
            EquivalenceLabel::NotEquivalentDifferent => bin.different += 1,
            EquivalenceLabel::NotEquivalentDegraded => bin.degraded += 1,
        }
    }
    Ok(HistogramReport { bins })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{SourceSystem, Split};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eq() -> RatingVector {
        RatingVector::interchangeable("r")
    }
    fn diff() -> RatingVector {
        RatingVector::different("r")
    }
    fn degr() -> RatingVector {
        RatingVector::degraded("r", true, false)
    }

    fn example(id: &str, reference: &str, candidate: &str, ratings: Vec<RatingVector>) -> AEExample {
        AEExample {
            example_id: id.into(),
            question: "q".into(),
            context: String::new(),
            reference: reference.into(),
            candidate: candidate.into(),
            source_system: SourceSystem::XLNet,
            split: Split::Dev,
            ratings,
        }
    }

    fn rating_for(positive: bool) -> RatingVector {
        if positive {
            eq()
        } else {
            diff()
        }
    }

    // Coincidence-matrix construction: for every unit, every ordered pair of
    // distinct ratings (i != j) adds 1/(m_u - 1) to o[v_i][v_j].
    fn oracle_alpha(units: &[Vec<usize>]) -> f64 {
        let mut o = [[0f64; 2]; 2];
        for unit in units.iter().filter(|u| u.len() >= 2) {
            let w = 1.0 / (unit.len() - 1) as f64;
            for i in 0..unit.len() {
                for j in 0..unit.len() {
                    if i != j {
                        o[unit[i]][unit[j]] += w;
                    }
                }
            }
        }
        let n_c = [o[0][0] + o[0][1], o[1][0] + o[1][1]];
        let n = n_c[0] + n_c[1];
        let d_o = (o[0][1] + o[1][0]) / n;
        let d_e = 2.0 * n_c[0] * n_c[1] / (n * (n - 1.0));
        if d_e == 0.0 {
            1.0
        } else {
            1.0 - d_o / d_e
        }
    }

    #[test]
    fn labels_from_ratings() {
        assert_eq!(derive_label(&eq()).unwrap(), EquivalenceLabel::Equivalent);
        assert_eq!(derive_label(&diff()).unwrap(), EquivalenceLabel::NotEquivalentDifferent);
        assert_eq!(
            derive_label(&RatingVector::degraded("r", true, false)).unwrap(),
            EquivalenceLabel::NotEquivalentDegraded
        );
        let mut bad = diff();
        bad.q2_interchangeable = Some(true);
        assert!(matches!(derive_label(&bad), Err(AnnotationError::SkipLogic(_))));
    }

    #[test]
    fn majority_and_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(aggregate(&[eq(), eq(), degr()], &mut rng).unwrap(), EquivalenceLabel::Equivalent);
        assert_eq!(aggregate(&[eq()], &mut rng).unwrap(), EquivalenceLabel::Equivalent);
        assert_eq!(aggregate(&[], &mut rng), Err(AnnotationError::NoRatings));
    }

    #[test]
    fn subclass_majority_with_tie_to_different() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            aggregate(&[degr(), degr(), diff()], &mut rng).unwrap(),
            EquivalenceLabel::NotEquivalentDegraded
        );
        assert_eq!(
            aggregate(&[degr(), diff(), eq()], &mut rng).unwrap(),
            EquivalenceLabel::NotEquivalentDifferent
        );
    }

    #[test]
    fn ties_are_seeded() {
        let ratings = [eq(), degr()];
        for seed in 0..20 {
            let a = aggregate(&ratings, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = aggregate(&ratings, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a, b);
        }
        let outcomes: std::collections::HashSet<_> = (0..40)
            .map(|s| aggregate(&ratings, &mut ChaCha8Rng::seed_from_u64(s)).unwrap())
            .collect();
        assert_eq!(outcomes.len(), 2, "both outcomes reachable");
    }

    #[test]
    fn perfect_agreement() {
        let exs = vec![
            example("a", "x", "y", vec![eq(), eq(), eq()]),
            example("b", "x", "y", vec![diff(), degr()]),
        ];
        let r = agreement_stats(&exs).unwrap();
        assert_eq!((r.pairwise_agreement, r.full_agreement_rate, r.krippendorff_alpha), (1.0, 1.0, 1.0));
        assert_eq!(r.n_multi_rated, 2);
    }

    #[test]
    fn two_raters_four_items() {
        let pairs = [(1, 1), (0, 0), (1, 0), (0, 0)];
        let exs: Vec<_> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| example(&i.to_string(), "x", "y", vec![rating_for(a == 1), rating_for(b == 1)]))
            .collect();
        let oracle = oracle_alpha(&pairs.iter().map(|&(a, b)| vec![a, b]).collect::<Vec<_>>());
        // o00 = 4, o11 = 2, o01 = o10 = 1: alpha = 1 - (2/8) / (30/56) = 8/15
        assert!((oracle - 8.0 / 15.0).abs() < 1e-12);
        let r = agreement_stats(&exs).unwrap();
        assert!((r.krippendorff_alpha - oracle).abs() < 1e-12);
        assert_eq!(r.pairwise_agreement, 0.75);
        assert_eq!(r.full_agreement_rate, 0.75);
    }

    #[test]
    fn singletons_only_is_an_error() {
        let exs = vec![example("a", "x", "y", vec![eq()])];
        assert_eq!(agreement_stats(&exs), Err(AnnotationError::NoMultiRated));
    }

    #[test]
    fn histogram_edges() {
        let a = example("a", "x", "y", vec![]);
        let b = example("b", "x y", "x y", vec![]);
        let h = f1_histogram(
            &[(&a, EquivalenceLabel::NotEquivalentDifferent), (&b, EquivalenceLabel::Equivalent)],
            10,
            NormalizationProfile::SIMPLE,
        )
        .unwrap();
        assert_eq!(h.bins[0].different, 1);
        assert_eq!(h.bins[9].equivalent, 1);
        assert_eq!(h.bins.iter().map(HistogramBin::total).sum::<usize>(), 2);
        assert_eq!(f1_histogram(&[], 0, NormalizationProfile::SIMPLE), Err(AnnotationError::NoBins));
    }

    #[test]
    fn bin_index_boundaries() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 1);
        assert_eq!(bin_index(0.3, 10), 3);
        assert_eq!(bin_index(0.7, 10), 7);
        assert_eq!(bin_index(0.0999999, 10), 0);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(1.0, 1), 0);
        assert_eq!(bin_index(2.0 / 3.0, 3), 2);
    }

    fn units_strategy() -> impl Strategy<Value = Vec<Vec<bool>>> {
        prop::collection::vec(prop::collection::vec(any::<bool>(), 1..=4), 1..=10)
    }

    proptest! {
        #[test]
        fn agreement_matches_brute_force(units in units_strategy()) {
            let exs: Vec<_> = units
                .iter()
                .enumerate()
                .map(|(i, u)| example(&i.to_string(), "x", "y", u.iter().map(|&p| rating_for(p)).collect()))
                .collect();
            let multi: Vec<&Vec<bool>> = units.iter().filter(|u| u.len() >= 2).collect();
            prop_assume!(!multi.is_empty());
            let r = agreement_stats(&exs).unwrap();

            let (mut agree, mut total) = (0usize, 0usize);
            for u in &multi {
                for i in 0..u.len() {
                    for j in (i + 1)..u.len() {
                        total += 1;
                        agree += usize::from(u[i] == u[j]);
                    }
                }
            }
            prop_assert_eq!(r.pairwise_agreement, agree as f64 / total as f64);
            let unanimous = multi.iter().filter(|u| u.iter().all(|&v| v == u[0])).count();
            prop_assert_eq!(r.full_agreement_rate, unanimous as f64 / multi.len() as f64);

            let encoded: Vec<Vec<usize>> = units.iter().map(|u| u.iter().map(|&p| usize::from(p)).collect()).collect();
            prop_assert!((r.krippendorff_alpha - oracle_alpha(&encoded)).abs() <= 1e-9);
            prop_assert!(r.krippendorff_alpha <= 1.0);
        }

        #[test]
        fn identical_raters_give_alpha_one(labels in prop::collection::vec(any::<bool>(), 1..10)) {
            let exs: Vec<_> = labels
                .iter()
                .enumerate()
                .map(|(i, &p)| example(&i.to_string(), "x", "y", vec![rating_for(p), rating_for(p)]))
                .collect();
            prop_assert_eq!(agreement_stats(&exs).unwrap().krippendorff_alpha, 1.0);
        }

        #[test]
        fn aggregate_is_permutation_invariant(
            kinds in prop::collection::vec(0u8..3, 1..6),
            seed in any::<u64>(),
            shuffle_seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let ratings: Vec<RatingVector> = kinds.iter().map(|k| match k { 0 => eq(), 1 => diff(), _ => degr() }).collect();
            let mut shuffled = ratings.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
            let a = aggregate(&ratings, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = aggregate(&shuffled, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn histogram_conserves_counts(
            items in prop::collection::vec(("[a-c]( [a-c]){0,3}", "[a-c]( [a-c]){0,3}", 0u8..3), 0..30),
            bins in 1usize..15,
        ) {
            let exs: Vec<_> = items.iter().enumerate().map(|(i, (r, c, _))| example(&i.to_string(), r, c, vec![])).collect();
            let labeled: Vec<_> = exs.iter().zip(&items).map(|(e, (_, _, k))| {
                (e, match k { 0 => EquivalenceLabel::Equivalent, 1 => EquivalenceLabel::NotEquivalentDifferent, _ => EquivalenceLabel::NotEquivalentDegraded })
            }).collect();
            let h = f1_histogram(&labeled, bins, NormalizationProfile::SIMPLE).unwrap();
            prop_assert_eq!(h.bins.len(), bins);
            prop_assert_eq!(h.bins.iter().map(HistogramBin::total).sum::<usize>(), items.len());
        }
    }
}
