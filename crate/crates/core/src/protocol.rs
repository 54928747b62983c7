//! Test protocol: several shuffled orderings of one test set, each fed
//! through a fresh session, scored and aggregated. Also the openness sweep,
//! which retrains with growing known-class sets.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{apply_split, Dataset, SplitSpec};
use crate::distributions::ClassId;
use crate::matrix::Matrix;
use crate::metrics::{aggregate_runs, evaluate, openness, AggregateReport, EvalReport};
use crate::openset::{OpenSetSession, StreamResult};
use crate::trainer::{fit, ModelCheckpoint, TrainConfig};
use crate::Error;

/// One ordering's outcome plus a summary of its event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub report: EvalReport,
    pub created: Vec<ClassId>,
    pub events: usize,
    pub founding_warnings: usize,
    pub class_evaluations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub seed: u64,
    pub known: Vec<ClassId>,
    pub aggregate: AggregateReport,
    pub per_run: Vec<RunRecord>,
}

/// Order used by the run with `seed`.
pub fn ordering(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Streams pre-embedded test rows in the given order. Event sample indices
/// refer to rows of `embeddings`.
pub fn stream_embeddings(checkpoint: &ModelCheckpoint, embeddings: &Matrix, order: &[usize]) -> Result<StreamResult, Error> {
    let mut session = OpenSetSession::new(checkpoint)?;
    for &i in order {
        session.classify_embedding(i, embeddings.row(i))?;
    }
    Ok(session.finish())
}

/// One ordering: stream, then score against `test.labels`.
pub fn run_once(checkpoint: &ModelCheckpoint, test: &Dataset, embeddings: &Matrix, run: usize, seed: u64) -> Result<RunRecord, Error> {
    let order = ordering(test.len(), seed);
    let result = stream_embeddings(checkpoint, embeddings, &order)?;
    let predictions: Vec<ClassId> = result.predictions.iter().map(|p| p.label).collect();
    let truths: Vec<ClassId> = order.iter().map(|&i| test.labels[i]).collect();
    let known: BTreeSet<ClassId> = checkpoint.known_classes().iter().copied().collect();
    let mut report = evaluate(&predictions, &truths, &known)?;
    report.novel_classes_created = result.created.len();
    Ok(RunRecord {
        run,
        seed,
        report,
        created: result.created,
        events: result.events.len(),
        founding_warnings: result.warnings.len(),
        class_evaluations: result.class_evaluations,
    })
}

/// `runs` orderings with seeds `seed, seed+1, ...`. Runs execute in
/// parallel; the report does not depend on scheduling.
pub fn test_protocol(checkpoint: &ModelCheckpoint, test: &Dataset, runs: usize, seed: u64) -> Result<ProtocolReport, Error> {
    if runs == 0 {
        return Err(crate::metrics::MetricsError::Contract("runs must be positive".into()).into());
    }
    checkpoint.validate()?;
    let embeddings = crate::diffnet::embed(&checkpoint.network, &checkpoint.params, &test.samples)?;
    let records: Vec<Result<RunRecord, Error>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..runs)
            .map(|r| {
                let embeddings = &embeddings;
                scope.spawn(move || run_once(checkpoint, test, embeddings, r, seed.wrapping_add(r as u64)))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("test run panicked")).collect()
    });
    let per_run = records.into_iter().collect::<Result<Vec<_>, _>>()?;
    let reports: Vec<EvalReport> = per_run.iter().map(|r| r.report.clone()).collect();
    Ok(ProtocolReport {
        seed,
        known: checkpoint.known_classes().to_vec(),
        aggregate: aggregate_runs(&reports)?,
        per_run,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub known_count: usize,
    pub c_train: usize,
    pub c_recognize: usize,
    pub c_test: usize,
    pub openness: f64,
    pub dscore: f64,
    pub best_epoch: usize,
    pub aggregate: AggregateReport,
}

/// Retrains with the first `c` known classes for each `c` in `known_counts`.
/// Dropped known classes become test-time unknowns; the validation-unknown
/// set is unchanged. λ reverts to the default weights.
pub fn openness_sweep(
    train_pool: &Dataset,
    test_pool: &Dataset,
    split: &SplitSpec,
    base: &TrainConfig,
    known_counts: &[usize],
    runs: usize,
    seed: u64,
) -> Result<Vec<SweepRow>, Error> {
    let total = split.all_classes().len();
    let mut rows = Vec::with_capacity(known_counts.len());
    for &c in known_counts {
        if c == 0 || c > split.known.len() {
            return Err(crate::data::DataError::Config(format!(
                "known count {c} outside 1..={}",
                split.known.len()
            ))
            .into());
        }
        let mut spec = split.clone();
        spec.known = split.known[..c].to_vec();
        let mut dropped = split.known[c..].to_vec();
        dropped.extend(&split.test_unknown);
        spec.test_unknown = dropped;
        let splits = apply_split(train_pool, test_pool, &spec)?;
        let mut config = base.clone();
        config.lambda = None;
        config.first_novel_id = Some(spec.first_free_id());
        let outcome = fit(&splits.train, &splits.validation, &config)?;
        let report = test_protocol(&outcome.checkpoint, &splits.test, runs, seed)?;
        rows.push(SweepRow {
            known_count: c,
            c_train: c,
            c_recognize: total,
            c_test: total,
            openness: openness(c, total, total)?,
            dscore: outcome.checkpoint.report.dscore,
            best_epoch: outcome.checkpoint.report.epoch,
            aggregate: report.aggregate,
        });
    }
    Ok(rows)
}
