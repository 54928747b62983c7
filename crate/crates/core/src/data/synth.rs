use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::distributions::ClassId;
use crate::error::ShapeError;
use crate::matrix::Matrix;

/// One isotropic Gaussian blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub label: ClassId,
    pub mean: Vec<f64>,
    pub sigma: f64,
    pub count: usize,
}

/// Samples every blob in order from one seeded stream.
pub fn synth_blobs(specs: &[BlobSpec], input_dim: usize, seed: u64) -> Result<Dataset, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = specs.iter().map(|s| s.count).sum();
    let mut data = Vec::with_capacity(total * input_dim);
    let mut labels = Vec::with_capacity(total);
    for spec in specs {
        if spec.mean.len() != input_dim {
            return Err(ShapeError::new(format!("blob {} mean", spec.label), input_dim, spec.mean.len()).into());
        }
        if !(spec.sigma > 0.0 && spec.sigma.is_finite()) {
            return Err(DataError::Config(format!("blob {}: sigma must be positive", spec.label)));
        }
        if spec.count == 0 {
            return Err(DataError::Config(format!("blob {}: count must be at least 1", spec.label)));
        }
        for _ in 0..spec.count {
            for &m in &spec.mean {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push(m + spec.sigma * e);
            }
            labels.push(spec.label);
        }
    }
    let samples = Matrix::from_vec(total, input_dim, data)?;
    Dataset::new(samples, labels, format!("synthetic blobs (seed {seed})"))
}

/// `n` means with pairwise distance exactly `distance`: scaled, distinct
/// basis vectors. Needs `n <= input_dim`.
pub fn separated_means(n: usize, input_dim: usize, distance: f64) -> Result<Vec<Vec<f64>>, DataError> {
    if n > input_dim {
        return Err(DataError::Config(format!(
            "cannot place {n} equidistant means in {input_dim} dimensions"
        )));
    }
    let scale = distance / std::f64::consts::SQRT_2;
    Ok((0..n)
        .map(|i| {
            let mut m = vec![0.0; input_dim];
            m[i] = scale;
            m
        })
        .collect())
}
