//! Datasets, splits, and on-disk formats.

pub mod checkpoint;
pub mod config;
pub mod csv;
pub mod idx;
mod split;
mod synth;

pub use split::{apply_split, Portion, SplitSpec, Splits};
pub use synth::{separated_means, synth_blobs, BlobSpec};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::distributions::ClassId;
use crate::error::ShapeError;
use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Labeled samples. `ids` identify rows within their source file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Matrix,
    pub labels: Vec<ClassId>,
    pub ids: Vec<usize>,
    pub provenance: String,
}

impl Dataset {
    /// Rows get ids `0..n`.
    pub fn new(samples: Matrix, labels: Vec<ClassId>, provenance: impl Into<String>) -> Result<Self, DataError> {
        let ids = (0..labels.len()).collect();
        Self::with_ids(samples, labels, ids, provenance)
    }

    pub fn with_ids(
        samples: Matrix,
        labels: Vec<ClassId>,
        ids: Vec<usize>,
        provenance: impl Into<String>,
    ) -> Result<Self, DataError> {
        if samples.rows() != labels.len() {
            return Err(ShapeError::new("label count", samples.rows(), labels.len()).into());
        }
        if ids.len() != labels.len() {
            return Err(ShapeError::new("id count", labels.len(), ids.len()).into());
        }
        Ok(Self {
            samples,
            labels,
            ids,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn subset(&self, indices: &[usize], provenance: impl Into<String>) -> Dataset {
        Dataset {
            samples: self.samples.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            provenance: provenance.into(),
        }
    }

    pub fn label_set(&self) -> BTreeSet<ClassId> {
        self.labels.iter().copied().collect()
    }

    pub fn class_counts(&self) -> BTreeMap<ClassId, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }

    /// Row indices per class, in row order.
    pub fn indices_by_class(&self) -> BTreeMap<ClassId, Vec<usize>> {
        let mut by = BTreeMap::<ClassId, Vec<usize>>::new();
        for (i, &l) in self.labels.iter().enumerate() {
            by.entry(l).or_default().push(i);
        }
        by
    }
}

/// Writes via a sibling temporary file and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| DataError::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(DataError::io(path, e));
    }
    Ok(())
}
