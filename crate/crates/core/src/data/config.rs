//! Experiment configuration (JSON).
//!
//! ```json
//! {
//!   "dataset": { "kind": "idx", "train_images": "...", "train_labels": "...",
//!                "test_images": "...", "test_labels": "..." },
//!   "split": { "known": [0,1,2,3,4,5,6], "validation_unknown": [7], "test_unknown": [8,9],
//!              "validation": 1000, "train_size": 5000, "test_size": 1000, "seed": 0 },
//!   "network": { "hidden": [256, 64], "latent_dim": 50, "activation": "relu" },
//!   "training": { "epochs": 20, "batch_size": 64, "learning_rate": 0.001 },
//!   "mode": "shared_isometric",
//!   "lambda": null,
//!   "runs": 10,
//!   "seeds": { "network": 0, "training": 0, "test": 0 }
//! }
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{apply_split, csv, idx, separated_means, synth_blobs, BlobSpec, DataError, Dataset, SplitSpec, Splits};
use crate::diffnet::{Activation, AdamConfig, NetworkSpec};
use crate::distributions::{ClassId, CovarianceMode};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Precomputed feature tables in the `id,label,...` layout.
    Csv { train: PathBuf, test: PathBuf },
    /// Isotropic Gaussian blobs with equidistant means.
    Synthetic {
        input_dim: usize,
        classes: Vec<ClassId>,
        separation: f64,
        sigma: f64,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
}

fn default_epochs() -> usize {
    50
}

fn default_batch() -> usize {
    64
}

fn default_lr() -> f64 {
    AdamConfig::default().lr
}

fn default_runs() -> usize {
    10
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub network: u64,
    #[serde(default)]
    pub training: u64,
    #[serde(default)]
    pub test: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub split: SplitSpec,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub mode: CovarianceMode,
    #[serde(default)]
    pub lambda: Option<BTreeMap<ClassId, f64>>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub output: OutputPaths,
}

impl RunConfig {
    pub fn parse(bytes: &[u8], source: &Path) -> Result<Self, DataError> {
        let mut de = serde_json::Deserializer::from_slice(bytes);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| DataError::Format {
            path: source.to_path_buf(),
            message: format!("at `{}`: {}", e.path(), e.inner()),
        })?;
        if let Some(dir) = source.parent() {
            cfg.resolve_paths(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
        Self::parse(&bytes, path)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
            DatasetSource::Csv { train, test } => {
                fix(train);
                fix(test);
            }
            DatasetSource::Synthetic { .. } => {}
        }
        for p in [&mut self.output.checkpoint, &mut self.output.report].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        self.split.validate()?;
        let bad = |m: String| Err(DataError::Config(m));
        if self.network.latent_dim == 0 || self.network.hidden.contains(&0) {
            return bad("network widths must be positive".into());
        }
        if self.training.epochs == 0 || self.training.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.training.learning_rate.is_finite() && self.training.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.training.learning_rate));
        }
        if self.runs == 0 {
            return bad("runs must be positive".into());
        }
        if let DatasetSource::Synthetic {
            input_dim,
            classes,
            sigma,
            separation,
            train_per_class,
            test_per_class,
            ..
        } = &self.dataset
        {
            if *input_dim < classes.len() || *sigma <= 0.0 || *separation <= 0.0 || *train_per_class == 0 || *test_per_class == 0 {
                return bad("synthetic dataset needs input_dim >= class count and positive sigma, separation and counts".into());
            }
            if let Some(id) = self.split.all_classes().iter().find(|c| !classes.contains(c)) {
                return bad(format!("class {id} is not generated by the synthetic dataset"));
            }
        }
        Ok(())
    }

    /// Training and test pools before splitting.
    pub fn load_pools(&self) -> Result<(Dataset, Dataset), crate::Error> {
        Ok(match &self.dataset {
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => (idx::load_idx(train_images, train_labels)?, idx::load_idx(test_images, test_labels)?),
            DatasetSource::Csv { train, test } => (csv::read_table(train)?, csv::read_table(test)?),
            DatasetSource::Synthetic {
                input_dim,
                classes,
                separation,
                sigma,
                train_per_class,
                test_per_class,
                seed,
            } => {
                let means = separated_means(classes.len(), *input_dim, separation * sigma)?;
                let specs = |count: usize| -> Vec<BlobSpec> {
                    classes
                        .iter()
                        .zip(&means)
                        .map(|(&label, mean)| BlobSpec {
                            label,
                            mean: mean.clone(),
                            sigma: *sigma,
                            count,
                        })
                        .collect()
                };
                (
                    synth_blobs(&specs(*train_per_class), *input_dim, *seed)?,
                    synth_blobs(&specs(*test_per_class), *input_dim, seed.wrapping_add(1))?,
                )
            }
        })
    }

    pub fn splits(&self) -> Result<Splits, crate::Error> {
        let (train, test) = self.load_pools()?;
        Ok(apply_split(&train, &test, &self.split)?)
    }

    pub fn network_spec(&self, input_dim: usize) -> NetworkSpec {
        let mut widths = self.network.hidden.clone();
        widths.push(self.network.latent_dim);
        NetworkSpec::new(input_dim, widths, self.network.activation, self.seeds.network)
    }

    pub fn train_config(&self, input_dim: usize) -> TrainConfig {
        let mut cfg = TrainConfig::new(self.network_spec(input_dim), self.mode);
        cfg.epochs = self.training.epochs;
        cfg.batch_size = self.training.batch_size;
        cfg.adam.lr = self.training.learning_rate;
        cfg.lambda = self.lambda.clone();
        cfg.seed = self.seeds.training;
        cfg.first_novel_id = Some(self.split.first_free_id());
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYNTH: &str = r#"{
        "dataset": {"kind": "synthetic", "input_dim": 6, "classes": [0,1,2,3],
                    "separation": 10.0, "sigma": 1.0, "train_per_class": 20, "test_per_class": 5},
        "split": {"known": [0,1], "validation_unknown": [2], "test_unknown": [3], "validation": 0.3},
        "network": {"hidden": [8], "latent_dim": 3},
        "training": {"epochs": 2},
        "mode": "isometric"
    }"#;

    #[test]
    fn defaults_and_derived_configs() {
        let cfg = RunConfig::parse(SYNTH.as_bytes(), Path::new("/tmp/x/run.json")).unwrap();
        assert_eq!(cfg.runs, 10);
        assert_eq!(cfg.training.batch_size, 64);
        let tc = cfg.train_config(6);
        assert_eq!(tc.network.layer_widths, vec![8, 3]);
        assert_eq!(tc.first_novel_id, Some(ClassId(4)));
        let s = cfg.splits().unwrap();
        assert_eq!(s.train.input_dim(), 6);
        assert_eq!(s.test.label_set().len(), 4);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let text = SYNTH.replace("\"epochs\": 2", "\"epochs\": 2, \"epoch\": 3");
        let err = RunConfig::parse(text.as_bytes(), Path::new("run.json")).unwrap_err();
        assert!(err.to_string().contains("training"), "{err}");
    }

    #[test]
    fn relative_paths_follow_config_location() {
        let text = r#"{
            "dataset": {"kind": "csv", "train": "a.csv", "test": "/abs/b.csv"},
            "split": {"known": [0], "validation_unknown": [1], "test_unknown": [], "validation": 10},
            "network": {"hidden": [], "latent_dim": 2},
            "training": {},
            "mode": "shared_diagonal"
        }"#;
        let cfg = RunConfig::parse(text.as_bytes(), Path::new("/data/cfg/run.json")).unwrap();
        match cfg.dataset {
            DatasetSource::Csv { train, test } => {
                assert_eq!(train, PathBuf::from("/data/cfg/a.csv"));
                assert_eq!(test, PathBuf::from("/abs/b.csv"));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn invalid_values_rejected() {
        let text = SYNTH.replace("\"epochs\": 2", "\"epochs\": 0");
        assert!(RunConfig::parse(text.as_bytes(), Path::new("r.json")).is_err());
        let text = SYNTH.replace("[0,1,2,3],", "[0,1,2],");
        assert!(RunConfig::parse(text.as_bytes(), Path::new("r.json")).is_err());
    }
}
