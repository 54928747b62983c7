use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::distributions::ClassId;

/// Size of the validation partition: an absolute count or a fraction of the
/// validation-eligible samples (known plus validation-unknown classes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Portion {
    Count(usize),
    Fraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// Classes with training data.
    pub known: Vec<ClassId>,
    /// Classes that appear in validation (and test) but never in training.
    pub validation_unknown: Vec<ClassId>,
    /// Classes first seen at test time.
    pub test_unknown: Vec<ClassId>,
    pub validation: Portion,
    #[serde(default)]
    pub train_size: Option<usize>,
    #[serde(default)]
    pub test_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = BTreeSet::new();
        for id in self.known.iter().chain(&self.validation_unknown).chain(&self.test_unknown) {
            if !seen.insert(*id) {
                return Err(DataError::Config(format!("class {id} appears in more than one split list")));
            }
        }
        if self.known.is_empty() {
            return Err(DataError::Config("no known classes".into()));
        }
        if let Portion::Fraction(f) = self.validation {
            if !(0.0..=1.0).contains(&f) {
                return Err(DataError::Config(format!("validation fraction {f} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn all_classes(&self) -> BTreeSet<ClassId> {
        self.known
            .iter()
            .chain(&self.validation_unknown)
            .chain(&self.test_unknown)
            .copied()
            .collect()
    }

    /// One past the largest class id named anywhere in the split.
    pub fn first_free_id(&self) -> ClassId {
        ClassId(self.all_classes().iter().map(|c| c.0 + 1).max().unwrap_or(0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Partitions a training pool into train/validation and filters a test pool.
///
/// The training pool is shuffled with `spec.seed`; validation takes the
/// first eligible samples until its quota is met, and remaining known-class
/// samples form the training set. Test-unknown classes never leave the test
/// pool.
pub fn apply_split(train_pool: &Dataset, test_pool: &Dataset, spec: &SplitSpec) -> Result<Splits, DataError> {
    spec.validate()?;
    let pool_labels = train_pool.label_set();
    for id in spec.known.iter().chain(&spec.validation_unknown) {
        if !pool_labels.contains(id) {
            return Err(DataError::Config(format!("class {id} is absent from the training pool")));
        }
    }
    let test_labels = test_pool.label_set();
    for id in &spec.test_unknown {
        if !test_labels.contains(id) {
            return Err(DataError::Config(format!("class {id} is absent from the test pool")));
        }
    }

    let known: BTreeSet<ClassId> = spec.known.iter().copied().collect();
    let eligible: BTreeSet<ClassId> = known.iter().chain(&spec.validation_unknown).copied().collect();
    let everything = spec.all_classes();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..train_pool.len()).collect();
    order.shuffle(&mut rng);

    let n_eligible = order.iter().filter(|&&i| eligible.contains(&train_pool.labels[i])).count();
    let quota = match spec.validation {
        Portion::Count(n) => n.min(n_eligible),
        Portion::Fraction(f) => (f * n_eligible as f64).round() as usize,
    };
    let train_cap = spec.train_size.unwrap_or(usize::MAX);

    let mut validation = Vec::with_capacity(quota);
    let mut train = Vec::new();
    for i in order {
        let label = train_pool.labels[i];
        if eligible.contains(&label) && validation.len() < quota {
            validation.push(i);
        } else if known.contains(&label) && train.len() < train_cap {
            train.push(i);
        }
    }

    rng.set_stream(1);
    let mut test: Vec<usize> = (0..test_pool.len())
        .filter(|&i| everything.contains(&test_pool.labels[i]))
        .collect();
    test.shuffle(&mut rng);
    if let Some(cap) = spec.test_size {
        test.truncate(cap);
    }

    Ok(Splits {
        train: train_pool.subset(&train, format!("{} [train]", train_pool.provenance)),
        validation: train_pool.subset(&validation, format!("{} [validation]", train_pool.provenance)),
        test: test_pool.subset(&test, format!("{} [test]", test_pool.provenance)),
    })
}
