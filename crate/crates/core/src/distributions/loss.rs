//! Class-balanced negative log-likelihood and its analytic gradients.

use super::{ClassId, DistributionError, TrainableDistributions, LN_2PI, VAR_FLOOR};
use crate::error::ShapeError;
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Same shape as the embeddings passed in.
    pub embedding_grads: Matrix,
    pub mean_grads: Vec<f64>,
    pub log_variance_grads: Vec<f64>,
}

/// `−Σ_i w_i log p_{c_i}(z_i)` with gradients for every input.
///
/// Row `i` of `embeddings` belongs to class index `class_index[i]` (an index
/// into `dists.class_ids`) and carries weight `weights[i]`. The trainer uses
/// `w_i = 1/n_k` with `n_k` the full training size of the sample's class.
pub fn weighted_nll(
    dists: &TrainableDistributions,
    embeddings: &Matrix,
    class_index: &[usize],
    weights: &[f64],
) -> Result<LossOutput, DistributionError> {
    dists.validate()?;
    let n = embeddings.rows();
    let d = dists.latent_dim;
    if embeddings.cols() != d {
        return Err(ShapeError::new("embedding columns", d, embeddings.cols()).into());
    }
    if class_index.len() != n {
        return Err(ShapeError::new("class index length", n, class_index.len()).into());
    }
    if weights.len() != n {
        return Err(ShapeError::new("weight length", n, weights.len()).into());
    }

    let k = dists.n_classes();
    let variances: Vec<Vec<f64>> = (0..k).map(|c| dists.variance(c)).collect();
    // The floor is a hard clamp: no gradient flows into a floored entry.
    let floored: Vec<Vec<bool>> = (0..k)
        .map(|c| {
            (0..d)
                .map(|j| dists.log_variances[dists.mode.log_variance_index(c, j)].exp() < VAR_FLOOR)
                .collect()
        })
        .collect();

    let mut loss = 0.0;
    let mut embedding_grads = Matrix::zeros(n, d);
    let mut mean_grads = vec![0.0; dists.means.len()];
    let mut log_variance_grads = vec![0.0; dists.log_variances.len()];

    for i in 0..n {
        let c = class_index[i];
        if c >= k {
            return Err(DistributionError::Contract(format!("class index {c} out of range")));
        }
        let w = weights[i];
        let z = embeddings.row(i);
        let mu = dists.mean(c);
        let var = &variances[c];
        let mut term = d as f64 * LN_2PI;
        let gz = embedding_grads.row_mut(i);
        for j in 0..d {
            let diff = z[j] - mu[j];
            let scaled = diff / var[j];
            term += diff * scaled + var[j].ln();
            gz[j] = w * scaled;
            mean_grads[c * d + j] -= w * scaled;
            if !floored[c][j] {
                log_variance_grads[dists.mode.log_variance_index(c, j)] += 0.5 * w * (1.0 - diff * scaled);
            }
        }
        let contribution = 0.5 * w * term;
        if !contribution.is_finite() {
            return Err(DistributionError::NonFinite {
                class: dists.class_ids[c],
            });
        }
        loss += contribution;
    }

    Ok(LossOutput {
        loss,
        embedding_grads,
        mean_grads,
        log_variance_grads,
    })
}

fn stack(
    dists: &TrainableDistributions,
    batches: &[(ClassId, Matrix)],
) -> Result<(Matrix, Vec<usize>, Vec<f64>), DistributionError> {
    let mut seen = vec![false; dists.n_classes()];
    let mut rows: Vec<&[f64]> = Vec::new();
    let mut class_index = Vec::new();
    let mut weights = Vec::new();
    for (id, batch) in batches {
        let c = dists.index_of(*id).ok_or(DistributionError::UnknownClass(*id))?;
        if batch.rows() == 0 {
            return Err(DistributionError::Contract(format!("class {id} has no samples")));
        }
        if batch.cols() != dists.latent_dim {
            return Err(ShapeError::new(format!("class {id} embedding columns"), dists.latent_dim, batch.cols()).into());
        }
        seen[c] = true;
        let w = 1.0 / batch.rows() as f64;
        for z in batch.iter_rows() {
            rows.push(z);
            class_index.push(c);
            weights.push(w);
        }
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(DistributionError::Contract(format!(
            "class {} contributes no samples",
            dists.class_ids[c]
        )));
    }
    Ok((Matrix::from_rows(&rows)?, class_index, weights))
}

/// `J = −Σ_k (1/n_k) Σ_i log p_k(z_i^k)` over per-class embedding sets.
pub fn loss(dists: &TrainableDistributions, batches: &[(ClassId, Matrix)]) -> Result<f64, DistributionError> {
    let (z, idx, w) = stack(dists, batches)?;
    Ok(weighted_nll(dists, &z, &idx, &w)?.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub loss: f64,
    /// One gradient matrix per input batch, in input order.
    pub embeddings: Vec<Matrix>,
    pub means: Vec<f64>,
    pub log_variances: Vec<f64>,
}

pub fn loss_gradients(
    dists: &TrainableDistributions,
    batches: &[(ClassId, Matrix)],
) -> Result<LossGradients, DistributionError> {
    let (z, idx, w) = stack(dists, batches)?;
    let out = weighted_nll(dists, &z, &idx, &w)?;
    let mut embeddings = Vec::with_capacity(batches.len());
    let mut offset = 0;
    for (_, batch) in batches {
        let rows: Vec<usize> = (offset..offset + batch.rows()).collect();
        embeddings.push(out.embedding_grads.select_rows(&rows));
        offset += batch.rows();
    }
    Ok(LossGradients {
        loss: out.loss,
        embeddings,
        means: out.mean_grads,
        log_variances: out.log_variance_grads,
    })
}
