//! Diagonal Gaussian class models in the latent space.
//!
//! Every class is a Gaussian with diagonal covariance. During training the
//! means and log-variances are free parameters laid out by
//! [`CovarianceMode`] ([`TrainableDistributions`]); after validation each
//! class becomes an independent [`ClassDistribution`] carrying its
//! Normal-inverse-Wishart counts and acceptance threshold. All likelihoods
//! and thresholds live in the log domain.

mod loss;
mod niw;
mod registry;

pub use loss::{loss, loss_gradients, weighted_nll, LossGradients, LossOutput};
pub use niw::{map_estimate, niw_update, scale_prior_from_learned, NiwParams};
pub use registry::{transfer_parameters, DistributionRegistry};

use std::fmt;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ShapeError;
use crate::matrix::Matrix;

/// Lower bound applied to every variance entry.
pub const VAR_FLOOR: f64 = 1e-6;

/// Dimension used by the MAP denominator; every latent feature is updated
/// as an independent 1-D Gaussian.
pub const D_EFF: usize = 1;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum DistributionError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss term for class {class}")]
    NonFinite { class: ClassId },
    #[error("transfer pool is empty")]
    EmptyTransferPool,
    #[error("class {0} has no threshold")]
    MissingThreshold(ClassId),
    #[error("unknown class {0}")]
    UnknownClass(ClassId),
    #[error("duplicate class {0}")]
    DuplicateClass(ClassId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u32> for ClassId {
    fn from(v: u32) -> Self {
        ClassId(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    /// One variance scalar shared by every class.
    SharedIsometric,
    /// One variance scalar per class.
    Isometric,
    /// One diagonal shared by every class.
    SharedDiagonal,
}

impl CovarianceMode {
    pub fn log_variance_len(self, n_classes: usize, latent_dim: usize) -> usize {
        match self {
            CovarianceMode::SharedIsometric => 1,
            CovarianceMode::Isometric => n_classes,
            CovarianceMode::SharedDiagonal => latent_dim,
        }
    }

    #[inline]
    pub fn log_variance_index(self, class_index: usize, dim: usize) -> usize {
        match self {
            CovarianceMode::SharedIsometric => 0,
            CovarianceMode::Isometric => class_index,
            CovarianceMode::SharedDiagonal => dim,
        }
    }

    pub fn is_isometric(self) -> bool {
        matches!(self, CovarianceMode::SharedIsometric | CovarianceMode::Isometric)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Learned jointly with the network.
    Trained,
    /// Built from validation data alone (a validation-unknown class).
    Validated,
    /// Created at test time by parameter transfer.
    Novel,
}

/// Log of a diagonal Gaussian density. Callers guarantee matching lengths.
#[inline]
pub fn gaussian_log_density(mean: &[f64], variance: &[f64], z: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((&m, &v), &x) in mean.iter().zip(variance).zip(z) {
        let d = x - m;
        acc += d * d / v + v.ln();
    }
    -0.5 * (acc + mean.len() as f64 * LN_2PI)
}

/// One class's Gaussian plus its conjugate-update state.
///
/// Besides the MAP variance, the posterior scale diagonal `S` is kept, so
/// that repeated rank-1 updates agree with a single batch update even when
/// the variance floor has been active along the way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDistribution {
    pub(crate) class_id: ClassId,
    pub(crate) mean: Vec<f64>,
    pub(crate) variance_diag: Vec<f64>,
    pub(crate) scatter: Vec<f64>,
    pub(crate) kappa: f64,
    pub(crate) nu: f64,
    pub(crate) log_threshold: Option<f64>,
    pub(crate) origin: Origin,
}

impl ClassDistribution {
    /// A class whose Gaussian was learned from `n_train` training samples.
    /// The scale is set so that the MAP variance reproduces `variance`.
    pub fn from_learned(
        class_id: ClassId,
        mean: Vec<f64>,
        variance: Vec<f64>,
        n_train: usize,
    ) -> Result<Self, DistributionError> {
        if mean.len() != variance.len() {
            return Err(ShapeError::new("variance length", mean.len(), variance.len()).into());
        }
        let count = n_train as f64;
        let variance: Vec<f64> = variance.into_iter().map(|v| v.max(VAR_FLOOR)).collect();
        let scatter = variance
            .iter()
            .map(|v| v * (count + (D_EFF + 2) as f64))
            .collect();
        Ok(Self {
            class_id,
            mean,
            variance_diag: variance,
            scatter,
            kappa: count,
            nu: count,
            log_threshold: None,
            origin: Origin::Trained,
        })
    }

    /// A class at the MAP point of an NIW posterior.
    pub fn from_posterior(class_id: ClassId, post: &NiwParams, origin: Origin) -> Result<Self, DistributionError> {
        let (mean, variance) = map_estimate(post, D_EFF)?;
        Ok(Self {
            class_id,
            mean,
            variance_diag: variance,
            scatter: post.scale.clone(),
            kappa: post.kappa,
            nu: post.nu,
            log_threshold: None,
            origin,
        })
    }

    /// Rebuilds a class from stored fields (e.g. a checkpoint), checking invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        class_id: ClassId,
        mean: Vec<f64>,
        variance_diag: Vec<f64>,
        scatter: Vec<f64>,
        kappa: f64,
        nu: f64,
        log_threshold: Option<f64>,
        origin: Origin,
    ) -> Result<Self, DistributionError> {
        let dist = Self {
            class_id,
            mean,
            variance_diag,
            scatter,
            kappa,
            nu,
            log_threshold,
            origin,
        };
        dist.validate()?;
        Ok(dist)
    }

    pub fn validate(&self) -> Result<(), DistributionError> {
        let d = self.mean.len();
        if self.variance_diag.len() != d {
            return Err(ShapeError::new("variance length", d, self.variance_diag.len()).into());
        }
        if self.scatter.len() != d {
            return Err(ShapeError::new("scatter length", d, self.scatter.len()).into());
        }
        let bad = |msg: &str| Err(DistributionError::Contract(format!("class {}: {msg}", self.class_id)));
        if self.mean.iter().any(|m| !m.is_finite()) {
            return bad("non-finite mean");
        }
        if self.variance_diag.iter().any(|v| !(v.is_finite() && *v >= VAR_FLOOR)) {
            return bad("variance below floor or non-finite");
        }
        if self.scatter.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("negative or non-finite scatter");
        }
        if !(self.kappa >= 0.0 && self.nu >= 0.0) || self.kappa != self.nu {
            return bad("kappa and nu must be equal and non-negative");
        }
        if matches!(self.log_threshold, Some(t) if t.is_nan()) {
            return bad("threshold is NaN");
        }
        Ok(())
    }

    pub fn class_id(&self) -> ClassId {
        self.class_id
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance_diag(&self) -> &[f64] {
        &self.variance_diag
    }

    /// Posterior scale diagonal `S`.
    pub fn scatter(&self) -> &[f64] {
        &self.scatter
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn log_threshold(&self) -> Option<f64> {
        self.log_threshold
    }

    pub fn set_log_threshold(&mut self, t: f64) {
        self.log_threshold = Some(t);
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// The conjugate prior this class represents.
    pub fn as_prior(&self) -> NiwParams {
        NiwParams {
            kappa: self.kappa,
            nu: self.nu,
            mean: self.mean.clone(),
            scale: self.scatter.clone(),
        }
    }

    /// Collapses the diagonal to its average when `mode` is isometric.
    pub fn conform_to(&mut self, mode: CovarianceMode) {
        if !mode.is_isometric() || self.dim() == 0 {
            return;
        }
        let d = self.dim() as f64;
        let s = self.scatter.iter().sum::<f64>() / d;
        let v = self.variance_diag.iter().sum::<f64>() / d;
        self.scatter.iter_mut().for_each(|x| *x = s);
        self.variance_diag.iter_mut().for_each(|x| *x = v.max(VAR_FLOOR));
    }

    /// Log-density of `z`.
    pub fn log_density(&self, z: &[f64]) -> Result<f64, DistributionError> {
        if z.len() != self.dim() {
            return Err(ShapeError::new("latent vector", self.dim(), z.len()).into());
        }
        Ok(gaussian_log_density(&self.mean, &self.variance_diag, z))
    }

    /// Sum of log-densities over the rows of `embeddings`.
    pub fn class_log_likelihood(&self, embeddings: &Matrix) -> Result<f64, DistributionError> {
        if embeddings.rows() == 0 {
            return Err(DistributionError::Contract(format!(
                "class {} has no samples",
                self.class_id
            )));
        }
        embeddings
            .iter_rows()
            .map(|z| self.log_density(z))
            .sum()
    }

    /// Folds one observation into the posterior and moves to its MAP point:
    /// `S += κ/(κ+1)(z−μ)²`, `μ = (κμ+z)/(κ+1)`, `κ += 1`, `ν += 1`,
    /// `σ² = S/(ν + d_eff + 2)`. The threshold is untouched.
    pub fn rank1_update(&mut self, z: &[f64]) -> Result<(), DistributionError> {
        if z.len() != self.dim() {
            return Err(ShapeError::new("latent vector", self.dim(), z.len()).into());
        }
        let k = self.kappa;
        let shrink = k / (k + 1.0);
        let nu_next = self.nu + 1.0;
        let denom = nu_next + (D_EFF + 2) as f64;
        for j in 0..z.len() {
            let diff = z[j] - self.mean[j];
            self.scatter[j] += shrink * diff * diff;
            self.mean[j] = (k * self.mean[j] + z[j]) / (k + 1.0);
            self.variance_diag[j] = (self.scatter[j] / denom).max(VAR_FLOOR);
        }
        self.kappa = k + 1.0;
        self.nu = nu_next;
        Ok(())
    }
}

/// Free-function form of [`ClassDistribution::rank1_update`].
pub fn rank1_update(dist: &ClassDistribution, z: &[f64]) -> Result<ClassDistribution, DistributionError> {
    let mut next = dist.clone();
    next.rank1_update(z)?;
    Ok(next)
}

/// Training-time parameterization: flat class means (class-major) plus the
/// mode-shaped log-variance vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainableDistributions {
    pub mode: CovarianceMode,
    pub latent_dim: usize,
    pub class_ids: Vec<ClassId>,
    pub means: Vec<f64>,
    pub log_variances: Vec<f64>,
}

impl TrainableDistributions {
    /// Means are uniform draws rescaled to unit norm; log-variances start at 0.
    pub fn init(mode: CovarianceMode, latent_dim: usize, class_ids: Vec<ClassId>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut means = Vec::with_capacity(class_ids.len() * latent_dim);
        for _ in &class_ids {
            let mut v: Vec<f64> = (0..latent_dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
            means.extend(v);
        }
        let log_variances = vec![0.0; mode.log_variance_len(class_ids.len(), latent_dim)];
        Self {
            mode,
            latent_dim,
            class_ids,
            means,
            log_variances,
        }
    }

    pub fn validate(&self) -> Result<(), DistributionError> {
        let k = self.class_ids.len();
        if self.means.len() != k * self.latent_dim {
            return Err(ShapeError::new("means length", k * self.latent_dim, self.means.len()).into());
        }
        let lv = self.mode.log_variance_len(k, self.latent_dim);
        if self.log_variances.len() != lv {
            return Err(ShapeError::new("log_variances length", lv, self.log_variances.len()).into());
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn index_of(&self, id: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == id)
    }

    pub fn mean(&self, class_index: usize) -> &[f64] {
        &self.means[class_index * self.latent_dim..(class_index + 1) * self.latent_dim]
    }

    /// Variance per dimension, floored.
    pub fn variance(&self, class_index: usize) -> Vec<f64> {
        (0..self.latent_dim)
            .map(|j| {
                let lv = self.log_variances[self.mode.log_variance_index(class_index, j)];
                lv.exp().max(VAR_FLOOR)
            })
            .collect()
    }

    pub fn to_class_distribution(&self, class_index: usize, n_train: usize) -> Result<ClassDistribution, DistributionError> {
        ClassDistribution::from_learned(
            self.class_ids[class_index],
            self.mean(class_index).to_vec(),
            self.variance(class_index),
            n_train,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit(d: usize, mean: Vec<f64>) -> ClassDistribution {
        ClassDistribution::from_learned(ClassId(0), mean, vec![1.0; d], 1).unwrap()
    }

    #[test]
    fn density_at_mean_with_identity_covariance() {
        let dist = unit(2, vec![0.3, -0.7]);
        let v = dist.log_density(&[0.3, -0.7]).unwrap();
        assert!((v - (-(2.0 * PI).ln())).abs() < 1e-12);
        assert!((v + 1.837877).abs() < 1e-6);
    }

    #[test]
    fn scalar_density_matches_direct_formula() {
        let dist = ClassDistribution::from_learned(ClassId(1), vec![3.0], vec![0.4], 5).unwrap();
        let v = dist.log_density(&[3.0]).unwrap();
        let direct = -0.5 * (0.8 * PI).ln();
        assert!((v - direct).abs() < 1e-14);
        assert!((v + 0.46079).abs() < 1e-5);
    }

    #[test]
    fn density_is_shift_invariant() {
        let a = ClassDistribution::from_learned(ClassId(0), vec![1.0, 2.0], vec![0.5, 2.0], 3).unwrap();
        let b = ClassDistribution::from_learned(ClassId(0), vec![11.0, -8.0], vec![0.5, 2.0], 3).unwrap();
        let za = [1.7, 0.4];
        let zb = [11.7, -9.6];
        assert!((a.log_density(&za).unwrap() - b.log_density(&zb).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn density_dimension_mismatch() {
        assert!(matches!(unit(2, vec![0.0, 0.0]).log_density(&[1.0]), Err(DistributionError::Shape(_))));
    }

    #[test]
    fn class_log_likelihood_sums_terms() {
        let dist = ClassDistribution::from_learned(ClassId(0), vec![0.5, -1.0], vec![0.3, 2.0], 3).unwrap();
        let samples = Matrix::from_rows(&[[0.1, 0.2], [1.5, -3.0], [0.5, -1.0]]).unwrap();
        let mut expected = 0.0;
        for z in samples.iter_rows() {
            // Independent evaluation of the diagonal Gaussian.
            let mut lp = 0.0;
            for j in 0..2 {
                let v = dist.variance_diag()[j];
                lp += -0.5 * ((z[j] - dist.mean()[j]).powi(2) / v + (2.0 * PI * v).ln());
            }
            expected += lp;
        }
        let got = dist.class_log_likelihood(&samples).unwrap();
        assert!((got - expected).abs() < 1e-12);

        let one = Matrix::from_rows(&[[0.5, -1.0]]).unwrap();
        let unit_dist = unit(2, vec![0.5, -1.0]);
        assert!((unit_dist.class_log_likelihood(&one).unwrap() + 1.837877).abs() < 1e-6);
    }

    #[test]
    fn empty_class_is_a_contract_error() {
        let dist = unit(2, vec![0.0, 0.0]);
        assert!(matches!(
            dist.class_log_likelihood(&Matrix::zeros(0, 2)),
            Err(DistributionError::Contract(_))
        ));
    }

    #[test]
    fn rank1_from_empty_prior_takes_the_sample_as_mean() {
        let post = NiwParams::zero(3);
        let mut dist = ClassDistribution {
            class_id: ClassId(9),
            mean: post.mean.clone(),
            variance_diag: vec![VAR_FLOOR; 3],
            scatter: post.scale.clone(),
            kappa: 0.0,
            nu: 0.0,
            log_threshold: Some(-2.0),
            origin: Origin::Validated,
        };
        dist.rank1_update(&[1.5, -2.0, 0.25]).unwrap();
        assert_eq!(dist.mean(), &[1.5, -2.0, 0.25]);
        assert_eq!(dist.kappa(), 1.0);
        assert_eq!(dist.nu(), 1.0);
        assert_eq!(dist.log_threshold(), Some(-2.0));
        dist.rank1_update(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(dist.kappa(), 2.0);
    }

    #[test]
    fn rank1_matches_closed_form_when_floor_inactive() {
        let mut dist = ClassDistribution::from_learned(ClassId(0), vec![1.0], vec![0.7], 4).unwrap();
        dist.rank1_update(&[2.0]).unwrap();
        // sigma^2 <- [sigma^2 (nu+3) + k/(k+1) (z-mu)^2] / (nu+4) with k = nu = 4
        let expected_var = (0.7 * 7.0 + 0.8 * 1.0) / 8.0;
        assert!((dist.variance_diag()[0] - expected_var).abs() < 1e-14);
        assert!((dist.mean()[0] - 6.0 / 5.0).abs() < 1e-14);
    }

    #[test]
    fn isometric_conform_averages() {
        let mut dist = ClassDistribution::from_learned(ClassId(0), vec![0.0, 0.0], vec![1.0, 3.0], 2).unwrap();
        dist.conform_to(CovarianceMode::Isometric);
        assert_eq!(dist.variance_diag(), &[2.0, 2.0]);
        let mut diag = ClassDistribution::from_learned(ClassId(0), vec![0.0, 0.0], vec![1.0, 3.0], 2).unwrap();
        diag.conform_to(CovarianceMode::SharedDiagonal);
        assert_eq!(diag.variance_diag(), &[1.0, 3.0]);
    }

    #[test]
    fn trainable_layouts_follow_mode() {
        let ids = vec![ClassId(0), ClassId(1), ClassId(2)];
        for (mode, len) in [
            (CovarianceMode::SharedIsometric, 1),
            (CovarianceMode::Isometric, 3),
            (CovarianceMode::SharedDiagonal, 4),
        ] {
            let t = TrainableDistributions::init(mode, 4, ids.clone(), 5);
            assert_eq!(t.log_variances.len(), len);
            t.validate().unwrap();
            for k in 0..3 {
                let n: f64 = t.mean(k).iter().map(|x| x * x).sum();
                assert!((n - 1.0).abs() < 1e-12);
                assert_eq!(t.variance(k), vec![1.0; 4]);
            }
        }
    }
}
