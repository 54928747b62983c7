//! JSON checkpoints.
//!
//! Floats are written in shortest round-trip form (at most 17 significant
//! digits) and parsed exactly, so `load(save(x)) == x` bit for bit.

use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{write_atomic, DataError};
use crate::trainer::{ModelCheckpoint, TrainError, CHECKPOINT_FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: not valid JSON: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("{path}: checkpoint format_version {found:?}, expected {expected}")]
    Version {
        path: PathBuf,
        found: Option<u64>,
        expected: u32,
    },
    #[error("{path}: schema error at `{field}`: {message}")]
    Schema {
        path: PathBuf,
        field: String,
        message: String,
    },
    #[error("{path}: inconsistent checkpoint: {source}")]
    Invalid {
        path: PathBuf,
        #[source]
        source: TrainError,
    },
}

pub fn to_json(checkpoint: &ModelCheckpoint) -> Vec<u8> {
    serde_json::to_vec_pretty(checkpoint).expect("checkpoint serialization is infallible")
}

pub fn save_checkpoint(path: &Path, checkpoint: &ModelCheckpoint) -> Result<(), CheckpointError> {
    Ok(write_atomic(path, &to_json(checkpoint))?)
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelCheckpoint, CheckpointError> {
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| CheckpointError::Syntax {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let found = value.get("format_version").and_then(|v| v.as_u64());
    if found != Some(u64::from(CHECKPOINT_FORMAT_VERSION)) {
        return Err(CheckpointError::Version {
            path: path.to_path_buf(),
            found,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let checkpoint: ModelCheckpoint = serde_path_to_error::deserialize(value).map_err(|e| CheckpointError::Schema {
        path: path.to_path_buf(),
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    checkpoint.validate().map_err(|source| CheckpointError::Invalid {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(checkpoint)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{separated_means, synth_blobs, BlobSpec};
    use crate::diffnet::{Activation, NetworkSpec};
    use crate::distributions::{ClassId, CovarianceMode};
    use crate::trainer::{fit, replay_validation, TrainConfig};

    fn trained(mode: CovarianceMode) -> (ModelCheckpoint, crate::data::Dataset) {
        let means = separated_means(3, 4, 8.0).unwrap();
        let blobs = |count, seed| {
            let specs: Vec<BlobSpec> = means
                .iter()
                .enumerate()
                .map(|(i, m)| BlobSpec {
                    label: ClassId(i as u32),
                    mean: m.clone(),
                    sigma: 1.0,
                    count,
                })
                .collect();
            synth_blobs(&specs, 4, seed).unwrap()
        };
        let all = blobs(20, 1);
        let train_rows: Vec<usize> = (0..all.len()).filter(|&i| all.labels[i].0 < 2).collect();
        let train = all.subset(&train_rows, "train");
        let val = blobs(8, 2);
        let mut cfg = TrainConfig::new(NetworkSpec::new(4, vec![6, 3], Activation::Tanh, 1), mode);
        cfg.epochs = 3;
        cfg.batch_size = 8;
        (fit(&train, &val, &cfg).unwrap().checkpoint, val)
    }

    #[test]
    fn round_trip_is_exact_and_replays() {
        let (ckpt, val) = trained(CovarianceMode::SharedDiagonal);
        let dir = std::env::temp_dir().join(format!("distnet-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.mode(), CovarianceMode::SharedDiagonal);
        let replay = replay_validation(&back, &val).unwrap();
        assert_eq!(replay.report.dscore.to_bits(), ckpt.report.dscore.to_bits());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn corrupted_field_is_named() {
        let (ckpt, _) = trained(CovarianceMode::Isometric);
        let mut v: serde_json::Value = serde_json::from_slice(&to_json(&ckpt)).unwrap();
        v["registry"]["classes"][0]["kappa"] = serde_json::json!("many");
        let err = parse_checkpoint(&serde_json::to_vec(&v).unwrap(), Path::new("m.json")).unwrap_err();
        match err {
            CheckpointError::Schema { field, .. } => assert_eq!(field, "registry.classes[0].kappa"),
            e => panic!("unexpected {e}"),
        }
        let mut v: serde_json::Value = serde_json::from_slice(&to_json(&ckpt)).unwrap();
        v.as_object_mut().unwrap().remove("learned");
        let err = parse_checkpoint(&serde_json::to_vec(&v).unwrap(), Path::new("m.json")).unwrap_err();
        assert!(err.to_string().contains("learned"), "{err}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let (ckpt, _) = trained(CovarianceMode::SharedIsometric);
        let mut v: serde_json::Value = serde_json::from_slice(&to_json(&ckpt)).unwrap();
        v["format_version"] = serde_json::json!(99);
        let err = parse_checkpoint(&serde_json::to_vec(&v).unwrap(), Path::new("m.json")).unwrap_err();
        assert!(matches!(err, CheckpointError::Version { found: Some(99), .. }));
        assert!(matches!(parse_checkpoint(b"{", Path::new("m.json")), Err(CheckpointError::Syntax { .. })));
    }
}
