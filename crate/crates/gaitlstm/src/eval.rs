//! Confusion-matrix metrics (PD is the positive class) and subject-level
//! prediction by average pooling of per-segment probability vectors.

use std::fmt;

use crate::data::{CohortLabel, Segment};
use crate::error::{Error, Result};
use crate::model::{classifier_infer, ModelParams};
use crate::numerics::{kahan_sum, Vector};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalLevel {
    Segment,
    Subject,
}

impl EvalLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalLevel::Segment => "segment",
            EvalLevel::Subject => "subject",
        }
    }
}

/// The four ratios are `None` when their denominator is zero; serialization
/// prints those as "undefined" while always printing the raw counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub level: EvalLevel,
    pub counts: ConfusionCounts,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

fn show(v: Option<f64>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => "undefined".to_string(),
    }
}

pub fn compute_metrics(
    predictions: &[CohortLabel],
    truths: &[CohortLabel],
    level: EvalLevel,
) -> EvalReport {
    assert_eq!(
        predictions.len(),
        truths.len(),
        "{} predictions against {} truths",
        predictions.len(),
        truths.len()
    );
    assert!(!predictions.is_empty(), "cannot evaluate zero items");
    let mut counts = ConfusionCounts::default();
    for (&p, &t) in predictions.iter().zip(truths) {
        match (p, t) {
            (CohortLabel::Pd, CohortLabel::Pd) => counts.true_pos += 1,
            (CohortLabel::Pd, CohortLabel::Control) => counts.false_pos += 1,
            (CohortLabel::Control, CohortLabel::Control) => counts.true_neg += 1,
            (CohortLabel::Control, CohortLabel::Pd) => counts.false_neg += 1,
        }
    }
    EvalReport {
        level,
        counts,
        precision: ratio(counts.true_pos, counts.true_pos + counts.false_pos),
        sensitivity: ratio(counts.true_pos, counts.true_pos + counts.false_neg),
        specificity: ratio(counts.true_neg, counts.true_neg + counts.false_pos),
        accuracy: ratio(counts.true_pos + counts.true_neg, counts.total()),
    }
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "level,tp,fp,tn,fn,precision,sensitivity,specificity,accuracy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.level.as_str(),
            self.counts.true_pos,
            self.counts.false_pos,
            self.counts.true_neg,
            self.counts.false_neg,
            show(self.precision),
            show(self.sensitivity),
            show(self.specificity),
            show(self.accuracy)
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "level: {}", self.level.as_str())?;
        writeln!(f, "tp: {}", self.counts.true_pos)?;
        writeln!(f, "fp: {}", self.counts.false_pos)?;
        writeln!(f, "tn: {}", self.counts.true_neg)?;
        writeln!(f, "fn: {}", self.counts.false_neg)?;
        writeln!(f, "precision: {}", show(self.precision))?;
        writeln!(f, "sensitivity: {}", show(self.sensitivity))?;
        writeln!(f, "specificity: {}", show(self.specificity))?;
        write!(f, "accuracy: {}", show(self.accuracy))
    }
}

/// Mean of per-segment probability vectors, summed class-by-class in the
/// given order with compensated addition, so the pooled vector is bit-stable
/// under any reordering once callers fix the order (see `predict_subject`)
/// and exact means like 0.5 come out exact.
pub fn pool_probabilities(probs: &[Vector]) -> Vector {
    assert!(!probs.is_empty(), "cannot pool zero probability vectors");
    let classes = probs[0].len();
    for p in probs {
        assert_eq!(p.len(), classes, "probability vectors of unequal length");
    }
    let n = probs.len() as f64;
    Vector::from_vec(
        (0..classes)
            .map(|c| kahan_sum(probs.iter().map(|p| p[c])) / n)
            .collect(),
    )
}

/// Classify one recording: run inference on each of its segments, average
/// the probability vectors (segments taken in segment-index order so the
/// result is independent of caller ordering), and take the argmax. An exact
/// tie breaks to the lower class index, i.e. Control.
pub fn predict_subject(
    params: &ModelParams,
    segments: &[Segment],
    dropout_p: f64,
) -> Result<(CohortLabel, Vector)> {
    if segments.is_empty() {
        return Err(Error::InvalidInput(
            "cannot predict from zero segments".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by_key(|&i| (&segments[i].source_file, segments[i].segment_index));
    let mut probs = Vec::with_capacity(segments.len());
    for &i in &order {
        probs.push(classifier_infer(params, &segments[i].to_sequence(), dropout_p)?);
    }
    let pooled = pool_probabilities(&probs);
    Ok((CohortLabel::from_class_index(pooled.argmax()), pooled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{subject_of, FEATURES};
    use crate::model::init_params;
    use crate::numerics::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let truths = vec![
            CohortLabel::Pd,
            CohortLabel::Control,
            CohortLabel::Pd,
            CohortLabel::Control,
        ];
        let report = compute_metrics(&truths, &truths, EvalLevel::Segment);
        assert_eq!(report.precision, Some(1.0));
        assert_eq!(report.sensitivity, Some(1.0));
        assert_eq!(report.specificity, Some(1.0));
        assert_eq!(report.accuracy, Some(1.0));
    }

    #[test]
    fn degenerate_counts_follow_the_formulas() {
        // tp=9, fp=1, tn=0, fn=0: every denominator is still positive.
        let mut truths = vec![CohortLabel::Pd; 9];
        truths.push(CohortLabel::Control);
        let preds = vec![CohortLabel::Pd; 10];
        let report = compute_metrics(&preds, &truths, EvalLevel::Segment);
        assert_eq!(
            report.counts,
            ConfusionCounts {
                true_pos: 9,
                false_pos: 1,
                true_neg: 0,
                false_neg: 0
            }
        );
        assert_eq!(report.precision, Some(0.9));
        assert_eq!(report.sensitivity, Some(1.0));
        assert_eq!(report.specificity, Some(0.0));
        assert_eq!(report.accuracy, Some(0.9));
        assert_eq!(report.csv_row(), "segment,9,1,0,0,0.9,1,0,0.9");
    }

    #[test]
    fn zero_denominators_report_undefined_not_a_number() {
        // No truth negatives at all: specificity is 0/0.
        let truths = vec![CohortLabel::Pd; 10];
        let report = compute_metrics(&truths, &truths, EvalLevel::Subject);
        assert_eq!(report.specificity, None);
        assert_eq!(report.precision, Some(1.0));
        assert!(report.to_string().contains("specificity: undefined"));
        assert_eq!(report.csv_row(), "subject,10,0,0,0,1,1,undefined,1");
    }

    #[test]
    fn metrics_match_a_brute_force_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut flip = |_: usize| {
            if rng.gen_bool(0.5) {
                CohortLabel::Pd
            } else {
                CohortLabel::Control
            }
        };
        let preds: Vec<CohortLabel> = (0..1000).map(&mut flip).collect();
        let truths: Vec<CohortLabel> = (0..1000).map(&mut flip).collect();
        let report = compute_metrics(&preds, &truths, EvalLevel::Segment);

        let count = |p: CohortLabel, t: CohortLabel| {
            preds
                .iter()
                .zip(&truths)
                .filter(|&(&a, &b)| a == p && b == t)
                .count()
        };
        let tp = count(CohortLabel::Pd, CohortLabel::Pd);
        let fp = count(CohortLabel::Pd, CohortLabel::Control);
        let tn = count(CohortLabel::Control, CohortLabel::Control);
        let fal_n = count(CohortLabel::Control, CohortLabel::Pd);
        assert_eq!(report.counts.total(), 1000);
        assert_eq!(report.precision, Some(tp as f64 / (tp + fp) as f64));
        assert_eq!(report.sensitivity, Some(tp as f64 / (tp + fal_n) as f64));
        assert_eq!(report.specificity, Some(tn as f64 / (tn + fp) as f64));
        assert_eq!(report.accuracy, Some((tp + tn) as f64 / 1000.0));
    }

    #[test]
    fn relabeling_the_positive_class_swaps_the_dual_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut flip = |_: usize| {
            if rng.gen_bool(0.4) {
                CohortLabel::Pd
            } else {
                CohortLabel::Control
            }
        };
        let preds: Vec<CohortLabel> = (0..500).map(&mut flip).collect();
        let truths: Vec<CohortLabel> = (0..500).map(&mut flip).collect();
        let report = compute_metrics(&preds, &truths, EvalLevel::Segment);

        let swap = |l: CohortLabel| match l {
            CohortLabel::Pd => CohortLabel::Control,
            CohortLabel::Control => CohortLabel::Pd,
        };
        let preds_sw: Vec<CohortLabel> = preds.iter().map(|&l| swap(l)).collect();
        let truths_sw: Vec<CohortLabel> = truths.iter().map(|&l| swap(l)).collect();
        let dual = compute_metrics(&preds_sw, &truths_sw, EvalLevel::Segment);

        let c = report.counts;
        assert_eq!(
            dual.precision,
            ratio(c.true_neg, c.true_neg + c.false_neg)
        );
        assert_eq!(dual.sensitivity, report.specificity);
        assert_eq!(dual.specificity, report.sensitivity);
        assert_eq!(dual.accuracy, report.accuracy);
    }

    #[test]
    fn pooling_recovers_an_exact_half() {
        let probs = vec![
            Vector::from_vec(vec![0.6, 0.4]),
            Vector::from_vec(vec![0.7, 0.3]),
            Vector::from_vec(vec![0.2, 0.8]),
        ];
        let pooled = pool_probabilities(&probs);
        assert_eq!(pooled.as_slice(), &[0.5, 0.5]);
        // Exact tie: argmax takes the lower index, i.e. Control.
        assert_eq!(CohortLabel::from_class_index(pooled.argmax()), CohortLabel::Control);

        let symmetric = pool_probabilities(&[
            Vector::from_vec(vec![0.9, 0.1]),
            Vector::from_vec(vec![0.1, 0.9]),
        ]);
        assert_eq!(symmetric.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn pooled_vectors_stay_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let probs: Vec<Vector> = (0..rng.gen_range(1..8))
                .map(|_| {
                    let a: f64 = rng.gen_range(0.0..1.0);
                    Vector::from_vec(vec![a, 1.0 - a])
                })
                .collect();
            let pooled = pool_probabilities(&probs);
            assert!((pooled.sum() - 1.0).abs() < 1e-12);
        }
    }

    fn segment_with(seed: u64, file: &str, idx: usize) -> Segment {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Matrix::zeros(10, FEATURES);
        for v in features.as_mut_slice() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let stem = file.strip_suffix(".txt").unwrap_or(file);
        Segment {
            features,
            label: CohortLabel::Pd,
            source_subject: subject_of(stem),
            source_file: file.to_string(),
            segment_index: idx,
        }
    }

    #[test]
    fn subject_prediction_is_order_invariant_and_matches_single_segment() {
        let params = init_params(FEATURES, 6, None, 40);
        let segs: Vec<Segment> = (0..3)
            .map(|i| segment_with(100 + i as u64, "GaPt05_01.txt", i))
            .collect();

        let (_, pooled) = predict_subject(&params, &segs, 0.5).unwrap();
        let reversed: Vec<Segment> = segs.iter().rev().cloned().collect();
        let (_, pooled_rev) = predict_subject(&params, &reversed, 0.5).unwrap();
        assert_eq!(pooled.as_slice(), pooled_rev.as_slice());
        assert!((pooled.sum() - 1.0).abs() < 1e-12);

        let one = &segs[..1];
        let (label_one, pooled_one) = predict_subject(&params, one, 0.5).unwrap();
        let direct = classifier_infer(&params, &segs[0].to_sequence(), 0.5).unwrap();
        assert_eq!(pooled_one.as_slice(), direct.as_slice());
        assert_eq!(label_one, CohortLabel::from_class_index(direct.argmax()));
    }

    #[test]
    fn zero_segments_is_an_input_error() {
        let params = init_params(FEATURES, 4, None, 1);
        assert!(matches!(
            predict_subject(&params, &[], 0.5),
            Err(Error::InvalidInput(_))
        ));
    }
}
