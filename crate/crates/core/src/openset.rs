//! Sequential open-set classification.
//!
//! Samples arrive one at a time. Each is scored against every current
//! class; if every class rejects it a new class is created around it,
//! otherwise the most likely accepting class absorbs it with a rank-1
//! posterior update. Decisions depend on arrival order.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::diffnet::{embed, NetworkParams, NetworkSpec};
use crate::distributions::{ClassId, DistributionError, DistributionRegistry};
use crate::error::ShapeError;
use crate::matrix::Matrix;
use crate::trainer::{ModelCheckpoint, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_index: usize,
    pub label: ClassId,
    pub is_novel_creation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub sample_index: usize,
    pub assigned_label: ClassId,
    pub is_novel: bool,
    /// `(class, log-likelihood)` for every class present before the decision.
    pub log_likelihoods: Vec<(ClassId, f64)>,
}

/// Raised when a freshly created class fails to accept its own founding
/// sample under the transferred threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoundingWarning {
    pub sample_index: usize,
    pub class: ClassId,
    pub log_density: f64,
    pub log_threshold: f64,
}

/// True iff every class rejects: `log l_k < log t_k` for all `k`.
/// `log_likelihoods` is indexed like `registry.classes()`.
pub fn detect_novel(log_likelihoods: &[f64], registry: &DistributionRegistry) -> Result<bool, DistributionError> {
    if log_likelihoods.len() != registry.len() {
        return Err(ShapeError::new("log-likelihood entries", registry.len(), log_likelihoods.len()).into());
    }
    let mut novel = true;
    for (ll, class) in log_likelihoods.iter().zip(registry.classes()) {
        let t = class
            .log_threshold()
            .ok_or(DistributionError::MissingThreshold(class.class_id()))?;
        if *ll >= t {
            novel = false;
        }
    }
    Ok(novel)
}

/// Highest log-likelihood among accepting classes, smallest id on ties.
pub fn accepting_argmax(log_likelihoods: &[f64], registry: &DistributionRegistry) -> Option<ClassId> {
    let mut best: Option<(f64, ClassId)> = None;
    for (&ll, class) in log_likelihoods.iter().zip(registry.classes()) {
        if class.log_threshold().is_some_and(|t| ll >= t) {
            let id = class.class_id();
            best = match best {
                Some((b, bid)) if b > ll || (b == ll && bid < id) => Some((b, bid)),
                _ => Some((ll, id)),
            };
        }
    }
    best.map(|(_, id)| id)
}

/// A working copy of a checkpoint's model that evolves with the stream.
#[derive(Debug, Clone)]
pub struct OpenSetSession {
    spec: NetworkSpec,
    params: NetworkParams,
    registry: DistributionRegistry,
    known: BTreeSet<ClassId>,
    events: Vec<StreamEvent>,
    warnings: Vec<FoundingWarning>,
    class_evaluations: u64,
    scratch: Vec<f64>,
}

impl OpenSetSession {
    pub fn new(checkpoint: &ModelCheckpoint) -> Result<Self, TrainError> {
        checkpoint.validate()?;
        for class in checkpoint.registry.classes() {
            if class.log_threshold().is_none() {
                return Err(DistributionError::MissingThreshold(class.class_id()).into());
            }
        }
        Ok(Self {
            spec: checkpoint.network.clone(),
            params: checkpoint.params.clone(),
            registry: checkpoint.registry.clone(),
            known: checkpoint.known_classes().iter().copied().collect(),
            events: Vec::new(),
            warnings: Vec::new(),
            class_evaluations: 0,
            scratch: Vec::new(),
        })
    }

    /// Session over a bare registry, for callers that embed samples
    /// themselves.
    pub fn from_registry(spec: NetworkSpec, params: NetworkParams, registry: DistributionRegistry) -> Result<Self, TrainError> {
        params.check_against(&spec)?;
        if spec.latent_dim() != registry.latent_dim() {
            return Err(ShapeError::new("registry latent dimension", spec.latent_dim(), registry.latent_dim()).into_train());
        }
        Ok(Self {
            spec,
            params,
            registry,
            known: BTreeSet::new(),
            events: Vec::new(),
            warnings: Vec::new(),
            class_evaluations: 0,
            scratch: Vec::new(),
        })
    }

    pub fn registry(&self) -> &DistributionRegistry {
        &self.registry
    }

    pub fn known_classes(&self) -> &BTreeSet<ClassId> {
        &self.known
    }

    pub fn events(&self) -> &[StreamEvent] {
        &self.events
    }

    pub fn warnings(&self) -> &[FoundingWarning] {
        &self.warnings
    }

    /// Class log-densities evaluated so far during classification.
    pub fn class_evaluations(&self) -> u64 {
        self.class_evaluations
    }

    pub fn embed(&self, samples: &Matrix) -> Result<Matrix, TrainError> {
        Ok(embed(&self.spec, &self.params, samples)?)
    }

    pub fn classify_one(&mut self, sample_index: usize, x: &[f64]) -> Result<Prediction, TrainError> {
        let batch = Matrix::from_vec(1, x.len(), x.to_vec()).map_err(ShapeError::into_train)?;
        let z = self.embed(&batch)?;
        self.classify_embedding(sample_index, z.row(0))
    }

    pub fn classify_embedding(&mut self, sample_index: usize, z: &[f64]) -> Result<Prediction, TrainError> {
        if z.len() != self.registry.latent_dim() {
            return Err(ShapeError::new("latent vector", self.registry.latent_dim(), z.len()).into_train());
        }
        let mut lls = std::mem::take(&mut self.scratch);
        lls.clear();
        for class in self.registry.classes() {
            lls.push(class.log_density(z)?);
            self.class_evaluations += 1;
        }
        let winner = if detect_novel(&lls, &self.registry)? {
            None
        } else {
            accepting_argmax(&lls, &self.registry)
        };
        let snapshot = self.registry.classes().iter().map(|c| c.class_id()).zip(lls.iter().copied()).collect();
        self.scratch = lls;

        let prediction = match winner {
            Some(label) => {
                self.registry.update_class(label, z)?;
                Prediction {
                    sample_index,
                    label,
                    is_novel_creation: false,
                }
            }
            None => {
                let created = self.registry.transfer_parameters(z)?;
                let label = created.class_id();
                let log_density = created.log_density(z)?;
                let log_threshold = created.log_threshold().expect("transferred classes carry a threshold");
                if log_density < log_threshold {
                    self.warnings.push(FoundingWarning {
                        sample_index,
                        class: label,
                        log_density,
                        log_threshold,
                    });
                }
                Prediction {
                    sample_index,
                    label,
                    is_novel_creation: true,
                }
            }
        };
        self.events.push(StreamEvent {
            sample_index,
            assigned_label: prediction.label,
            is_novel: prediction.is_novel_creation,
            log_likelihoods: snapshot,
        });
        Ok(prediction)
    }

    pub fn finish(self) -> StreamResult {
        let created = self.events.iter().filter(|e| e.is_novel).map(|e| e.assigned_label).collect();
        StreamResult {
            predictions: self
                .events
                .iter()
                .map(|e| Prediction {
                    sample_index: e.sample_index,
                    label: e.assigned_label,
                    is_novel_creation: e.is_novel,
                })
                .collect(),
            registry: self.registry,
            created,
            events: self.events,
            warnings: self.warnings,
            class_evaluations: self.class_evaluations,
        }
    }
}

trait IntoTrain {
    fn into_train(self) -> TrainError;
}

impl IntoTrain for ShapeError {
    fn into_train(self) -> TrainError {
        TrainError::Distribution(self.into())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamResult {
    pub predictions: Vec<Prediction>,
    pub registry: DistributionRegistry,
    pub created: Vec<ClassId>,
    pub events: Vec<StreamEvent>,
    pub warnings: Vec<FoundingWarning>,
    pub class_evaluations: u64,
}

/// Classifies the rows of `samples` in order. Prediction `i` refers to row `i`.
pub fn run_stream(checkpoint: &ModelCheckpoint, samples: &Matrix) -> Result<StreamResult, TrainError> {
    let mut session = OpenSetSession::new(checkpoint)?;
    if samples.rows() > 0 {
        let z = session.embed(samples)?;
        for (i, row) in z.iter_rows().enumerate() {
            session.classify_embedding(i, row)?;
        }
    }
    Ok(session.finish())
}
