//! Training with per-epoch validation and model selection.
//!
//! Each epoch runs one shuffled mini-batch pass of Adam over the
//! class-balanced loss, then validates: class Gaussians get a conjugate
//! posterior update from the validation embeddings, every class picks the
//! log-likelihood threshold with the best F1 on the whole validation set,
//! and the λ-weighted F1 sum (`dscore`) ranks the epoch. The best epoch is
//! kept as a [`ModelCheckpoint`].

mod pr;

pub use pr::{default_lambda, discriminability, f1_score, pr_curve, select_threshold, PrCurvePoint};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::diffnet::{
    adam_step, backward, embed, forward, init_params, AdamConfig, AdamState, GradientBundle, NetworkError,
    NetworkParams, NetworkSpec,
};
use crate::distributions::{
    niw_update, scale_prior_from_learned, weighted_nll, ClassDistribution, ClassId, CovarianceMode,
    DistributionError, DistributionRegistry, NiwParams, Origin, TrainableDistributions,
};
use crate::matrix::Matrix;

/// Version written into every checkpoint.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}, class {class}")]
    NonFiniteLoss { epoch: usize, batch: usize, class: ClassId },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Per-class weights of the validation score; `None` uses [`default_lambda`].
    pub lambda: Option<BTreeMap<ClassId, f64>>,
    pub mode: CovarianceMode,
    pub network: NetworkSpec,
    /// Seeds class-mean initialization and batch shuffling.
    pub seed: u64,
    /// Lowest id handed to classes created at test time.
    pub first_novel_id: Option<ClassId>,
}

impl TrainConfig {
    pub fn new(network: NetworkSpec, mode: CovarianceMode) -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            adam: AdamConfig::default(),
            lambda: None,
            mode,
            network,
            seed: 0,
            first_novel_id: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub f1: f64,
    pub log_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationReport {
    pub epoch: usize,
    pub per_class: BTreeMap<ClassId, ClassScore>,
    pub lambda: BTreeMap<ClassId, f64>,
    pub dscore: f64,
}

/// Everything needed to run the open-set test with no other state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub network: NetworkSpec,
    pub params: NetworkParams,
    /// Validated classes with thresholds, plus the transfer pool.
    pub registry: DistributionRegistry,
    /// Class parameters as learned, before the validation update.
    pub learned: TrainableDistributions,
    pub train_counts: BTreeMap<ClassId, usize>,
    pub report: ValidationReport,
}

impl ModelCheckpoint {
    pub fn mode(&self) -> CovarianceMode {
        self.registry.mode()
    }

    pub fn known_classes(&self) -> &[ClassId] {
        &self.learned.class_ids
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(TrainError::Config(format!(
                "checkpoint format {} (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.network.validate()?;
        self.params.check_against(&self.network)?;
        self.learned.validate()?;
        self.registry.validate()?;
        if self.registry.latent_dim() != self.network.latent_dim() {
            return Err(TrainError::Contract("registry and network latent sizes differ".into()));
        }
        if self.registry.mode() != self.learned.mode {
            return Err(TrainError::Contract("registry and learned covariance modes differ".into()));
        }
        for id in &self.learned.class_ids {
            if !self.train_counts.contains_key(id) {
                return Err(TrainError::Contract(format!("no training count for class {id}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub dscore: f64,
    pub per_class_f1: BTreeMap<ClassId, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<EpochLog>,
}

/// Network, class parameters and optimizer during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub spec: NetworkSpec,
    pub params: NetworkParams,
    pub dists: TrainableDistributions,
    pub optimizer: AdamState,
    pub class_sizes: BTreeMap<ClassId, usize>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, train: &Dataset) -> Result<Self, TrainError> {
        let class_sizes = train.class_counts();
        if class_sizes.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        let spec = config.network.clone();
        spec.validate()?;
        if spec.input_dim != train.input_dim() {
            return Err(TrainError::Config(format!(
                "network input_dim {} but data has {} features",
                spec.input_dim,
                train.input_dim()
            )));
        }
        let params = init_params(&spec)?;
        let known: Vec<ClassId> = class_sizes.keys().copied().collect();
        let dists = TrainableDistributions::init(config.mode, spec.latent_dim(), known, config.seed);
        let optimizer = AdamState::new(config.adam, &params, dists.means.len(), dists.log_variances.len());
        Ok(Self {
            spec,
            params,
            dists,
            optimizer,
            class_sizes,
        })
    }
}

/// One shuffled pass of mini-batch Adam steps. Each sample's loss term is
/// scaled by `1/n_k` for its class's full training size, so the summed
/// batch losses reported here add up to the class-balanced objective.
pub fn train_epoch(state: &mut TrainState, train: &Dataset, config: &TrainConfig, epoch: usize) -> Result<f64, TrainError> {
    if config.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be positive".into()));
    }
    let mut class_index = Vec::with_capacity(train.len());
    let mut weights = Vec::with_capacity(train.len());
    for &label in &train.labels {
        let c = state
            .dists
            .index_of(label)
            .ok_or_else(|| TrainError::Config(format!("training label {label} is not a known class")))?;
        class_index.push(c);
        weights.push(1.0 / state.class_sizes[&label] as f64);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);

    let mut total = 0.0;
    for (b, batch) in order.chunks(config.batch_size).enumerate() {
        let x = train.samples.select_rows(batch);
        let idx: Vec<usize> = batch.iter().map(|&i| class_index[i]).collect();
        let w: Vec<f64> = batch.iter().map(|&i| weights[i]).collect();
        let (z, tape) = forward(&state.spec, &state.params, &x)?;
        let out = weighted_nll(&state.dists, &z, &idx, &w).map_err(|e| match e {
            DistributionError::NonFinite { class } => TrainError::NonFiniteLoss { epoch, batch: b, class },
            other => other.into(),
        })?;
        let network = backward(&tape, &state.params, &out.embedding_grads)?;
        let grads = GradientBundle {
            network,
            means: out.mean_grads,
            log_variances: out.log_variance_grads,
        };
        adam_step(
            &mut state.params,
            &mut state.dists.means,
            &mut state.dists.log_variances,
            &grads,
            &mut state.optimizer,
        )?;
        total += out.loss;
    }
    Ok(total)
}

fn rows_by_class(z: &Matrix, labels: &[ClassId]) -> BTreeMap<ClassId, Matrix> {
    let mut idx = BTreeMap::<ClassId, Vec<usize>>::new();
    for (i, &l) in labels.iter().enumerate() {
        idx.entry(l).or_default().push(i);
    }
    idx.into_iter().map(|(k, rows)| (k, z.select_rows(&rows))).collect()
}

/// Posterior classes from already-embedded validation data. Known classes
/// come first (in learned order), then the unknown ones.
fn posterior_from_embeddings(
    learned: &TrainableDistributions,
    train_counts: &BTreeMap<ClassId, usize>,
    z: &Matrix,
    labels: &[ClassId],
    unknown: &[ClassId],
) -> Result<Vec<ClassDistribution>, TrainError> {
    let grouped = rows_by_class(z, labels);
    let missing = |id: ClassId| TrainError::Config(format!("class {id} is missing from the validation set"));
    let mut classes = Vec::with_capacity(learned.n_classes() + unknown.len());
    for (k, &id) in learned.class_ids.iter().enumerate() {
        let n_train = *train_counts
            .get(&id)
            .ok_or_else(|| TrainError::Contract(format!("no training count for class {id}")))?;
        let data = grouped.get(&id).ok_or_else(|| missing(id))?;
        let prior = scale_prior_from_learned(&learned.to_class_distribution(k, n_train)?, n_train)?;
        let mut dist = ClassDistribution::from_posterior(id, &niw_update(&prior, data)?, Origin::Trained)?;
        dist.conform_to(learned.mode);
        classes.push(dist);
    }
    for &id in unknown {
        let data = grouped.get(&id).ok_or_else(|| missing(id))?;
        let post = niw_update(&NiwParams::zero(learned.latent_dim), data)?;
        let mut dist = ClassDistribution::from_posterior(id, &post, Origin::Validated)?;
        dist.conform_to(learned.mode);
        classes.push(dist);
    }
    Ok(classes)
}

/// Conjugate update of every class from the validation set. The network is
/// only read.
pub fn posterior_validate(
    spec: &NetworkSpec,
    params: &NetworkParams,
    learned: &TrainableDistributions,
    train_counts: &BTreeMap<ClassId, usize>,
    validation: &Dataset,
    unknown: &[ClassId],
) -> Result<Vec<ClassDistribution>, TrainError> {
    let z = embed(spec, params, &validation.samples)?;
    posterior_from_embeddings(learned, train_counts, &z, &validation.labels, unknown)
}

/// Scores every sample against every class, picks each class's best-F1
/// log-threshold (positives are the class's own samples) and stores it.
pub fn assign_thresholds(
    classes: &mut [ClassDistribution],
    z: &Matrix,
    labels: &[ClassId],
) -> Result<BTreeMap<ClassId, ClassScore>, TrainError> {
    let mut scores = BTreeMap::new();
    let mut buf = Vec::with_capacity(z.rows());
    for dist in classes.iter_mut() {
        buf.clear();
        for (row, &label) in z.iter_rows().zip(labels) {
            buf.push((dist.log_density(row)?, label == dist.class_id()));
        }
        let curve = pr_curve(&buf)?;
        let best = select_threshold(&curve).expect("curve is non-empty");
        dist.set_log_threshold(best.threshold);
        scores.insert(
            dist.class_id(),
            ClassScore {
                f1: best.f1,
                log_threshold: best.threshold,
            },
        );
    }
    Ok(scores)
}

/// Result of validating one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Validated {
    pub registry: DistributionRegistry,
    pub report: ValidationReport,
}

/// Per-epoch validation step used by [`fit_with_validator`].
pub trait Validator {
    fn validate(&mut self, epoch: usize, state: &TrainState) -> Result<Validated, TrainError>;
}

/// Posterior update + PR thresholds + weighted F1 on a held-out set.
#[derive(Debug, Clone)]
pub struct PosteriorValidator<'a> {
    pub validation: &'a Dataset,
    pub unknown: Vec<ClassId>,
    pub lambda: BTreeMap<ClassId, f64>,
    pub first_novel_id: Option<ClassId>,
}

impl<'a> PosteriorValidator<'a> {
    /// Unknown classes are the validation labels outside `known`.
    pub fn new(
        validation: &'a Dataset,
        known: &[ClassId],
        lambda: Option<BTreeMap<ClassId, f64>>,
        first_novel_id: Option<ClassId>,
    ) -> Result<Self, TrainError> {
        let known_set: BTreeSet<ClassId> = known.iter().copied().collect();
        let labels = validation.label_set();
        if let Some(id) = known.iter().find(|id| !labels.contains(id)) {
            return Err(TrainError::Config(format!("class {id} is missing from the validation set")));
        }
        let unknown: Vec<ClassId> = labels.difference(&known_set).copied().collect();
        if unknown.is_empty() {
            return Err(TrainError::Config(
                "validation set has no unknown classes; thresholds and novel-class transfer need at least one".into(),
            ));
        }
        let lambda = lambda.unwrap_or_else(|| default_lambda(known, &unknown));
        for id in known.iter().chain(&unknown) {
            match lambda.get(id) {
                Some(w) if *w >= 0.0 && w.is_finite() => {}
                Some(w) => return Err(TrainError::Config(format!("lambda for class {id} is {w}"))),
                None => return Err(TrainError::Config(format!("no lambda weight for class {id}"))),
            }
        }
        Ok(Self {
            validation,
            unknown,
            lambda,
            first_novel_id,
        })
    }

    /// Runs validation for fixed network and learned class parameters.
    pub fn run(
        &self,
        epoch: usize,
        spec: &NetworkSpec,
        params: &NetworkParams,
        learned: &TrainableDistributions,
        train_counts: &BTreeMap<ClassId, usize>,
    ) -> Result<Validated, TrainError> {
        let z = embed(spec, params, &self.validation.samples)?;
        let labels = &self.validation.labels;
        let mut classes = posterior_from_embeddings(learned, train_counts, &z, labels, &self.unknown)?;
        let per_class = assign_thresholds(&mut classes, &z, labels)?;
        let f1: BTreeMap<ClassId, f64> = per_class.iter().map(|(k, s)| (*k, s.f1)).collect();
        let dscore = discriminability(&f1, &self.lambda)?;
        let mut registry = DistributionRegistry::new(learned.mode, learned.latent_dim, classes, self.unknown.clone())?;
        if let Some(first) = self.first_novel_id {
            if first > registry.next_novel_id() {
                registry = registry.with_next_novel_id(first)?;
            }
        }
        Ok(Validated {
            registry,
            report: ValidationReport {
                epoch,
                per_class,
                lambda: self.lambda.clone(),
                dscore,
            },
        })
    }
}

impl Validator for PosteriorValidator<'_> {
    fn validate(&mut self, epoch: usize, state: &TrainState) -> Result<Validated, TrainError> {
        self.run(epoch, &state.spec, &state.params, &state.dists, &state.class_sizes)
    }
}

/// Trains for `config.epochs` epochs, validating after each, and returns the
/// checkpoint of the epoch with the highest `dscore` (earliest on ties).
pub fn fit(train: &Dataset, validation: &Dataset, config: &TrainConfig) -> Result<FitOutcome, TrainError> {
    let known: Vec<ClassId> = train.label_set().into_iter().collect();
    let mut validator = PosteriorValidator::new(validation, &known, config.lambda.clone(), config.first_novel_id)?;
    fit_with_validator(train, config, &mut validator)
}

pub fn fit_with_validator(
    train: &Dataset,
    config: &TrainConfig,
    validator: &mut dyn Validator,
) -> Result<FitOutcome, TrainError> {
    if config.epochs == 0 {
        return Err(TrainError::Config("epochs must be positive".into()));
    }
    let mut state = TrainState::new(config, train)?;
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<ModelCheckpoint> = None;
    for epoch in 1..=config.epochs {
        let loss = train_epoch(&mut state, train, config, epoch)?;
        let Validated { registry, report } = validator.validate(epoch, &state)?;
        log.push(EpochLog {
            epoch,
            loss,
            dscore: report.dscore,
            per_class_f1: report.per_class.iter().map(|(k, s)| (*k, s.f1)).collect(),
        });
        if best.as_ref().is_none_or(|b| report.dscore > b.report.dscore) {
            best = Some(ModelCheckpoint {
                format_version: CHECKPOINT_FORMAT_VERSION,
                network: state.spec.clone(),
                params: state.params.clone(),
                registry,
                learned: state.dists.clone(),
                train_counts: state.class_sizes.clone(),
                report,
            });
        }
    }
    Ok(FitOutcome {
        checkpoint: best.expect("at least one epoch ran"),
        log,
    })
}

/// Re-runs the validation of a stored checkpoint.
pub fn replay_validation(checkpoint: &ModelCheckpoint, validation: &Dataset) -> Result<Validated, TrainError> {
    let validator = PosteriorValidator::new(
        validation,
        checkpoint.known_classes(),
        Some(checkpoint.report.lambda.clone()),
        Some(checkpoint.registry.next_novel_id()),
    )?;
    validator.run(
        checkpoint.report.epoch,
        &checkpoint.network,
        &checkpoint.params,
        &checkpoint.learned,
        &checkpoint.train_counts,
    )
}
