use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::distributions::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrCurvePoint {
    /// Log-likelihood cut-off; a sample is accepted iff its score is `>=` this.
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// `2PR/(P+R)`, or 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Precision/recall at every distinct score, in ascending threshold order.
pub fn pr_curve(scores: &[(f64, bool)]) -> Result<Vec<PrCurvePoint>, TrainError> {
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(TrainError::Contract("NaN score".into()));
    }
    let positives = scores.iter().filter(|(_, p)| *p).count();
    if positives == 0 || positives == scores.len() {
        return Err(TrainError::Contract(
            "precision-recall curve needs both positive and negative labels".into(),
        ));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / positives as f64;
        points.push(PrCurvePoint {
            threshold,
            precision,
            recall,
            f1: f1_score(precision, recall),
        });
    }
    points.reverse();
    Ok(points)
}

/// Highest-F1 point; ties go to the larger threshold.
pub fn select_threshold(curve: &[PrCurvePoint]) -> Option<PrCurvePoint> {
    curve.iter().copied().reduce(|best, p| {
        if p.f1 > best.f1 || (p.f1 == best.f1 && p.threshold > best.threshold) {
            p
        } else {
            best
        }
    })
}

/// `Σ λ_k F_k`.
pub fn discriminability(f1: &BTreeMap<ClassId, f64>, lambda: &BTreeMap<ClassId, f64>) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (id, f) in f1 {
        let w = lambda
            .get(id)
            .ok_or_else(|| TrainError::Config(format!("no lambda weight for class {id}")))?;
        total += w * f;
    }
    Ok(total)
}

/// `1/l` for each of `l` known classes and `1/u` for each of `u` unknown
/// ones, so both groups carry total weight 1.
pub fn default_lambda(known: &[ClassId], unknown: &[ClassId]) -> BTreeMap<ClassId, f64> {
    let mut lambda = BTreeMap::new();
    for group in [known, unknown] {
        let w = 1.0 / group.len() as f64;
        for &id in group {
            lambda.insert(id, w);
        }
    }
    lambda
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_point_example() {
        let curve = pr_curve(&[(0.9, true), (0.8, false), (0.3, true)]).unwrap();
        assert_eq!(curve.len(), 3);
        let best = select_threshold(&curve).unwrap();
        assert_eq!(best.threshold, 0.3);
        assert!((best.f1 - 0.8).abs() < 1e-15);
        assert!((best.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(best.recall, 1.0);
    }

    #[test]
    fn separated_scores_reach_one() {
        let curve = pr_curve(&[(5.0, true), (4.0, true), (1.0, false), (0.5, false)]).unwrap();
        let best = select_threshold(&curve).unwrap();
        assert_eq!(best.f1, 1.0);
        assert_eq!(best.threshold, 4.0);
    }

    #[test]
    fn affine_transform_preserves_rates() {
        let scores = [(-3.0, true), (-1.5, false), (-7.0, true), (-2.2, true), (-9.0, false)];
        let moved: Vec<(f64, bool)> = scores.iter().map(|&(s, l)| (2.0 * s + 10.0, l)).collect();
        let a = pr_curve(&scores).unwrap();
        let b = pr_curve(&moved).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert_eq!((p.precision, p.recall, p.f1), (q.precision, q.recall, q.f1));
            assert_eq!(q.threshold, 2.0 * p.threshold + 10.0);
        }
    }

    #[test]
    fn single_point_and_ties() {
        let p = PrCurvePoint {
            threshold: 1.0,
            precision: 0.5,
            recall: 0.5,
            f1: 0.5,
        };
        assert_eq!(select_threshold(&[p]), Some(p));
        let q = PrCurvePoint { threshold: 2.0, ..p };
        assert_eq!(select_threshold(&[q, p]).unwrap().threshold, 2.0);
        assert_eq!(select_threshold(&[p, q]).unwrap().threshold, 2.0);
        assert_eq!(select_threshold(&[]), None);
    }

    #[test]
    fn one_sided_labels_rejected() {
        assert!(pr_curve(&[(1.0, true), (2.0, true)]).is_err());
        assert!(pr_curve(&[(1.0, false)]).is_err());
        assert!(pr_curve(&[(f64::NAN, true), (1.0, false)]).is_err());
    }

    #[test]
    fn lambda_weighting() {
        let known: Vec<ClassId> = (0..7).map(ClassId).collect();
        let unknown: Vec<ClassId> = (7..10).map(ClassId).collect();
        let lambda = default_lambda(&known, &unknown);
        assert!((lambda[&ClassId(0)] - 1.0 / 7.0).abs() < 1e-15);
        assert!((lambda[&ClassId(9)] - 1.0 / 3.0).abs() < 1e-15);
        let ones: BTreeMap<ClassId, f64> = lambda.keys().map(|&k| (k, 1.0)).collect();
        assert!((discriminability(&ones, &lambda).unwrap() - 2.0).abs() < 1e-12);
        let zeros: BTreeMap<ClassId, f64> = lambda.keys().map(|&k| (k, 0.0)).collect();
        assert_eq!(discriminability(&zeros, &lambda).unwrap(), 0.0);
        let mut extra = ones.clone();
        extra.insert(ClassId(42), 1.0);
        assert!(matches!(discriminability(&extra, &lambda), Err(TrainError::Config(_))));
    }
}
