//! Normal-inverse-Wishart conjugate updates, restricted to diagonals.

use serde::{Deserialize, Serialize};

use super::{ClassDistribution, DistributionError, Origin, D_EFF, VAR_FLOOR};
use crate::error::ShapeError;
use crate::matrix::Matrix;

/// NIW hyperparameters with a diagonal scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiwParams {
    pub kappa: f64,
    pub nu: f64,
    pub mean: Vec<f64>,
    /// Diagonal of the scale matrix `S`.
    pub scale: Vec<f64>,
}

impl NiwParams {
    /// The uninformative all-zero prior used for classes never seen in training.
    pub fn zero(dim: usize) -> Self {
        Self {
            kappa: 0.0,
            nu: 0.0,
            mean: vec![0.0; dim],
            scale: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn validate(&self) -> Result<(), DistributionError> {
        if self.scale.len() != self.mean.len() {
            return Err(ShapeError::new("scale length", self.mean.len(), self.scale.len()).into());
        }
        if !(self.kappa >= 0.0 && self.nu >= 0.0) {
            return Err(DistributionError::Contract("kappa and nu must be non-negative".into()));
        }
        if self.scale.iter().any(|s| !(*s >= 0.0)) {
            return Err(DistributionError::Contract("scale entries must be non-negative".into()));
        }
        Ok(())
    }
}

/// Posterior after observing the rows of `data`, per dimension:
///
/// `κ_N = κ_0 + N`, `ν_N = ν_0 + N`, `m_N = (κ_0 m_0 + N x̄)/κ_N`,
/// `S_N = S_0 + Σx² + κ_0 m_0² − κ_N m_N²`.
///
/// `S_N` is evaluated in the algebraically equal form
/// `S_0 + Σ(x − x̄)² + κ_0 N/κ_N (x̄ − m_0)²`, which avoids cancellation.
pub fn niw_update(prior: &NiwParams, data: &Matrix) -> Result<NiwParams, DistributionError> {
    prior.validate()?;
    let n = data.rows();
    if prior.kappa == 0.0 && n == 0 && prior.mean.iter().any(|&m| m != 0.0) {
        return Err(DistributionError::Contract(
            "kappa_N = 0 cannot carry a nonzero mean".into(),
        ));
    }
    if n == 0 {
        return Ok(prior.clone());
    }
    let d = prior.dim();
    if data.cols() != d {
        return Err(ShapeError::new("data columns", d, data.cols()).into());
    }

    let count = n as f64;
    let mut sample_mean = vec![0.0; d];
    for row in data.iter_rows() {
        for (s, &x) in sample_mean.iter_mut().zip(row) {
            *s += x;
        }
    }
    sample_mean.iter_mut().for_each(|s| *s /= count);

    let mut scatter = vec![0.0; d];
    for row in data.iter_rows() {
        for ((s, &x), &m) in scatter.iter_mut().zip(row).zip(&sample_mean) {
            *s += (x - m) * (x - m);
        }
    }

    let kappa_n = prior.kappa + count;
    let between = prior.kappa * count / kappa_n;
    let mut mean = Vec::with_capacity(d);
    let mut scale = Vec::with_capacity(d);
    for j in 0..d {
        mean.push((prior.kappa * prior.mean[j] + count * sample_mean[j]) / kappa_n);
        let gap = sample_mean[j] - prior.mean[j];
        scale.push(prior.scale[j] + scatter[j] + between * gap * gap);
    }
    Ok(NiwParams {
        kappa: kappa_n,
        nu: prior.nu + count,
        mean,
        scale,
    })
}

/// MAP point of an NIW posterior: `μ̂ = m_N`, `σ̂² = S_N / (ν_N + d_eff + 2)`,
/// floored at [`VAR_FLOOR`].
pub fn map_estimate(post: &NiwParams, d_eff: usize) -> Result<(Vec<f64>, Vec<f64>), DistributionError> {
    post.validate()?;
    if post.kappa <= 0.0 {
        return Err(DistributionError::Contract(
            "MAP estimate needs kappa > 0 (no mean information)".into(),
        ));
    }
    let denom = post.nu + d_eff as f64 + 2.0;
    if denom <= 0.0 {
        return Err(DistributionError::Contract("nu + d_eff + 2 must be positive".into()));
    }
    let variance = post.scale.iter().map(|s| (s / denom).max(VAR_FLOOR)).collect();
    Ok((post.mean.clone(), variance))
}

/// Prior for a trained class: `κ_0 = ν_0 = n_train`, `m_0` the learned mean,
/// `S_0 = σ² (ν_0 + d_eff + 2)` so that the MAP point with no new data is the
/// learned Gaussian itself.
pub fn scale_prior_from_learned(dist: &ClassDistribution, n_train: usize) -> Result<NiwParams, DistributionError> {
    if dist.origin() != Origin::Trained {
        return Err(DistributionError::Contract(format!(
            "class {} was not learned during training",
            dist.class_id()
        )));
    }
    if n_train == 0 {
        return Err(DistributionError::Contract("n_train must be positive".into()));
    }
    let count = n_train as f64;
    let factor = count + (D_EFF + 2) as f64;
    Ok(NiwParams {
        kappa: count,
        nu: count,
        mean: dist.mean().to_vec(),
        scale: dist.variance_diag().iter().map(|v| v * factor).collect(),
    })
}
