//! Open-set evaluation: known-class F1-micro, novel-class matching,
//! per-unknown-class F1, one-unknown F1, run aggregation and openness.
//!
//! A predicted label counts as "unknown" when it is not a known (trained)
//! class, which covers both classes created during the stream and
//! validation-unknown classes carried in the registry.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::ClassId;
use crate::error::ShapeError;
use crate::trainer::f1_score;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("contract violation: {0}")]
    Contract(String),
}

fn check_lengths(predictions: &[ClassId], truths: &[ClassId]) -> Result<(), MetricsError> {
    if predictions.len() != truths.len() {
        return Err(ShapeError::new("predictions", truths.len(), predictions.len()).into());
    }
    Ok(())
}

fn binary_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let r = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    f1_score(p, r)
}

/// Micro-averaged F1 over samples whose true label is known. Every error is
/// one false negative (for the true class) and one false positive (for the
/// predicted label, possibly a novel id), so the value equals accuracy.
pub fn f1_micro_known(predictions: &[ClassId], truths: &[ClassId], known: &BTreeSet<ClassId>) -> Result<f64, MetricsError> {
    check_lengths(predictions, truths)?;
    let (mut tp, mut wrong) = (0usize, 0usize);
    for (p, t) in predictions.iter().zip(truths) {
        if known.contains(t) {
            if p == t {
                tp += 1;
            } else {
                wrong += 1;
            }
        }
    }
    if tp + wrong == 0 {
        return Err(MetricsError::Contract("no test sample has a known true label".into()));
    }
    Ok(binary_f1(tp, wrong, wrong))
}

/// For each true unknown class, the unknown-predicted label receiving most
/// of its samples (ties to the smaller id), or `None`.
pub fn match_novel_classes(
    predictions: &[ClassId],
    truths: &[ClassId],
    known: &BTreeSet<ClassId>,
) -> Result<BTreeMap<ClassId, Option<ClassId>>, MetricsError> {
    check_lengths(predictions, truths)?;
    let mut counts: BTreeMap<ClassId, BTreeMap<ClassId, usize>> = BTreeMap::new();
    for (p, t) in predictions.iter().zip(truths) {
        if known.contains(t) {
            continue;
        }
        let per = counts.entry(*t).or_default();
        if !known.contains(p) {
            *per.entry(*p).or_default() += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(t, per)| {
            // BTreeMap iterates ids ascending, so `>` keeps the smallest on ties.
            let mut best: Option<(ClassId, usize)> = None;
            for (id, n) in per {
                if best.is_none_or(|(_, b)| n > b) {
                    best = Some((id, n));
                }
            }
            (t, best.map(|(id, _)| id))
        })
        .collect())
}

/// Binary F1 of "true label is unknown" against "predicted label is unknown".
pub fn one_unknown_f1(predictions: &[ClassId], truths: &[ClassId], known: &BTreeSet<ClassId>) -> Result<f64, MetricsError> {
    check_lengths(predictions, truths)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, t) in predictions.iter().zip(truths) {
        match (!known.contains(t), !known.contains(p)) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(binary_f1(tp, fp, fn_))
}

/// `1 − sqrt(2·c_train / (c_recognize + c_test))`.
pub fn openness(c_train: usize, c_recognize: usize, c_test: usize) -> Result<f64, MetricsError> {
    if c_train == 0 || c_recognize == 0 || c_test == 0 {
        return Err(MetricsError::Contract("class counts must be positive".into()));
    }
    if c_train > c_recognize {
        return Err(MetricsError::Contract(format!(
            "c_train {c_train} exceeds c_recognize {c_recognize}"
        )));
    }
    Ok(1.0 - (2.0 * c_train as f64 / (c_recognize + c_test) as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnknownScore {
    pub matched: Option<ClassId>,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1_micro_known: f64,
    pub per_unknown_f1: BTreeMap<ClassId, UnknownScore>,
    pub mean_unknown_f1: f64,
    pub one_unknown_f1: f64,
    pub samples: usize,
    pub known_samples: usize,
    pub unknown_samples: usize,
    pub novel_classes_created: usize,
}

/// Scores one completed stream. `novel_classes_created` is filled by the caller.
pub fn evaluate(predictions: &[ClassId], truths: &[ClassId], known: &BTreeSet<ClassId>) -> Result<EvalReport, MetricsError> {
    let f1_micro_known = f1_micro_known(predictions, truths, known)?;
    let matches = match_novel_classes(predictions, truths, known)?;
    let mut per_unknown_f1 = BTreeMap::new();
    for (&t, &matched) in &matches {
        let f1 = match matched {
            None => 0.0,
            Some(m) => {
                let (mut tp, mut fp, mut fn_) = (0, 0, 0);
                for (p, tr) in predictions.iter().zip(truths) {
                    match (*tr == t, *p == m) {
                        (true, true) => tp += 1,
                        (false, true) => fp += 1,
                        (true, false) => fn_ += 1,
                        (false, false) => {}
                    }
                }
                binary_f1(tp, fp, fn_)
            }
        };
        per_unknown_f1.insert(t, UnknownScore { matched, f1 });
    }
    let mean_unknown_f1 = if per_unknown_f1.is_empty() {
        0.0
    } else {
        per_unknown_f1.values().map(|s| s.f1).sum::<f64>() / per_unknown_f1.len() as f64
    };
    let known_samples = truths.iter().filter(|t| known.contains(t)).count();
    Ok(EvalReport {
        f1_micro_known,
        per_unknown_f1,
        mean_unknown_f1,
        one_unknown_f1: one_unknown_f1(predictions, truths, known)?,
        samples: truths.len(),
        known_samples,
        unknown_samples: truths.len() - known_samples,
        novel_classes_created: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat { mean: 0.0, std: 0.0 };
        }
        // Summation rounding would otherwise leave a tiny spread.
        if values.iter().all(|v| *v == values[0]) {
            return Stat { mean: values[0], std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub f1_micro_known: Stat,
    pub mean_unknown_f1: Stat,
    pub one_unknown_f1: Stat,
    pub per_unknown_f1: BTreeMap<ClassId, Stat>,
    pub novel_classes_created: Stat,
}

pub fn aggregate_runs(reports: &[EvalReport]) -> Result<AggregateReport, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::Contract("no runs to aggregate".into()));
    }
    let stat = |f: &dyn Fn(&EvalReport) -> f64| Stat::of(&reports.iter().map(f).collect::<Vec<_>>());
    let classes: BTreeSet<ClassId> = reports.iter().flat_map(|r| r.per_unknown_f1.keys().copied()).collect();
    let per_unknown_f1 = classes
        .into_iter()
        .map(|c| (c, stat(&|r| r.per_unknown_f1.get(&c).map_or(0.0, |s| s.f1))))
        .collect();
    Ok(AggregateReport {
        runs: reports.len(),
        f1_micro_known: stat(&|r| r.f1_micro_known),
        mean_unknown_f1: stat(&|r| r.mean_unknown_f1),
        one_unknown_f1: stat(&|r| r.one_unknown_f1),
        per_unknown_f1,
        novel_classes_created: stat(&|r| r.novel_classes_created as f64),
    })
}
