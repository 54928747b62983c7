use serde::{Deserialize, Serialize};

use super::{ClassDistribution, ClassId, CovarianceMode, DistributionError, Origin, D_EFF, VAR_FLOOR};
use crate::error::ShapeError;

/// All classes currently modeled, in creation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionRegistry {
    mode: CovarianceMode,
    latent_dim: usize,
    classes: Vec<ClassDistribution>,
    next_novel_id: ClassId,
    /// Validation-unknown classes whose parameters seed novel classes.
    transfer_pool: Vec<ClassId>,
}

impl DistributionRegistry {
    /// `next_novel_id` starts one past the largest class id.
    pub fn new(
        mode: CovarianceMode,
        latent_dim: usize,
        classes: Vec<ClassDistribution>,
        transfer_pool: Vec<ClassId>,
    ) -> Result<Self, DistributionError> {
        let next = classes
            .iter()
            .map(|c| c.class_id().0 + 1)
            .max()
            .unwrap_or(0);
        let reg = Self {
            mode,
            latent_dim,
            classes,
            next_novel_id: ClassId(next),
            transfer_pool,
        };
        reg.validate()?;
        Ok(reg)
    }

    /// Moves the novel-id counter forward, e.g. past every label in a dataset.
    pub fn with_next_novel_id(mut self, id: ClassId) -> Result<Self, DistributionError> {
        self.next_novel_id = id;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), DistributionError> {
        let mut ids: Vec<ClassId> = self.classes.iter().map(|c| c.class_id()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(DistributionError::DuplicateClass(w[0]));
        }
        for c in &self.classes {
            if c.dim() != self.latent_dim {
                return Err(ShapeError::new(format!("class {} dimension", c.class_id()), self.latent_dim, c.dim()).into());
            }
            c.validate()?;
            if c.class_id() >= self.next_novel_id {
                return Err(DistributionError::Contract(format!(
                    "next novel id {} does not exceed class {}",
                    self.next_novel_id,
                    c.class_id()
                )));
            }
        }
        for id in &self.transfer_pool {
            if self.get(*id).is_none() {
                return Err(DistributionError::UnknownClass(*id));
            }
        }
        Ok(())
    }

    pub fn mode(&self) -> CovarianceMode {
        self.mode
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn classes(&self) -> &[ClassDistribution] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.class_id()).collect()
    }

    pub fn next_novel_id(&self) -> ClassId {
        self.next_novel_id
    }

    pub fn transfer_pool(&self) -> &[ClassId] {
        &self.transfer_pool
    }

    pub fn index_of(&self, id: ClassId) -> Option<usize> {
        self.classes.iter().position(|c| c.class_id() == id)
    }

    pub fn get(&self, id: ClassId) -> Option<&ClassDistribution> {
        self.classes.iter().find(|c| c.class_id() == id)
    }

    pub fn get_mut(&mut self, id: ClassId) -> Option<&mut ClassDistribution> {
        self.classes.iter_mut().find(|c| c.class_id() == id)
    }

    /// Rank-1 posterior update of class `id`, keeping the mode's shape.
    pub fn update_class(&mut self, id: ClassId, z: &[f64]) -> Result<(), DistributionError> {
        let mode = self.mode;
        let dist = self.get_mut(id).ok_or(DistributionError::UnknownClass(id))?;
        dist.rank1_update(z)?;
        dist.conform_to(mode);
        Ok(())
    }

    /// Creates a novel class centered at `z`. Its variance and log-threshold
    /// are the averages over the transfer pool; `κ = ν = 1`.
    pub fn transfer_parameters(&mut self, z: &[f64]) -> Result<&ClassDistribution, DistributionError> {
        if z.len() != self.latent_dim {
            return Err(ShapeError::new("latent vector", self.latent_dim, z.len()).into());
        }
        if self.transfer_pool.is_empty() {
            return Err(DistributionError::EmptyTransferPool);
        }
        let d = self.latent_dim;
        let mut variance = vec![0.0; d];
        let mut threshold = 0.0;
        for id in &self.transfer_pool {
            let src = self.get(*id).ok_or(DistributionError::UnknownClass(*id))?;
            threshold += src.log_threshold().ok_or(DistributionError::MissingThreshold(*id))?;
            for (v, s) in variance.iter_mut().zip(src.variance_diag()) {
                *v += s;
            }
        }
        let pool = self.transfer_pool.len() as f64;
        variance.iter_mut().for_each(|v| *v = (*v / pool).max(VAR_FLOOR));
        let kappa = 1.0;
        let scatter = variance
            .iter()
            .map(|v| v * (kappa + (D_EFF + 2) as f64))
            .collect();
        let id = self.next_novel_id;
        self.classes.push(ClassDistribution {
            class_id: id,
            mean: z.to_vec(),
            variance_diag: variance,
            scatter,
            kappa,
            nu: kappa,
            log_threshold: Some(threshold / pool),
            origin: Origin::Novel,
        });
        self.next_novel_id = ClassId(id.0 + 1);
        Ok(self.classes.last().expect("just pushed"))
    }
}

/// Free-function form of [`DistributionRegistry::transfer_parameters`].
pub fn transfer_parameters(registry: &mut DistributionRegistry, z: &[f64]) -> Result<ClassDistribution, DistributionError> {
    registry.transfer_parameters(z).cloned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{niw_update, NiwParams};
    use crate::matrix::Matrix;

    fn unknown(id: u32, var: f64, threshold: f64) -> ClassDistribution {
        let mut c = ClassDistribution::from_learned(ClassId(id), vec![0.0, 0.0], vec![var, var], 5).unwrap();
        c.origin = Origin::Validated;
        c.set_log_threshold(threshold);
        c
    }

    fn registry(pool: Vec<ClassDistribution>) -> DistributionRegistry {
        let mut classes = vec![{
            let mut k = ClassDistribution::from_learned(ClassId(0), vec![5.0, 5.0], vec![1.0, 1.0], 20).unwrap();
            k.set_log_threshold(-3.0);
            k
        }];
        let ids = pool.iter().map(|c| c.class_id()).collect();
        classes.extend(pool);
        DistributionRegistry::new(CovarianceMode::SharedDiagonal, 2, classes, ids).unwrap()
    }

    #[test]
    fn single_pool_member_is_copied() {
        let mut reg = registry(vec![unknown(1, 0.3, -4.5)]);
        let novel = transfer_parameters(&mut reg, &[7.0, -1.0]).unwrap();
        assert_eq!(novel.class_id(), ClassId(2));
        assert_eq!(novel.mean(), &[7.0, -1.0]);
        assert_eq!(novel.variance_diag(), &[0.3, 0.3]);
        assert_eq!(novel.log_threshold(), Some(-4.5));
        assert_eq!((novel.kappa(), novel.nu()), (1.0, 1.0));
        assert_eq!(novel.origin(), Origin::Novel);
        assert_eq!(reg.len(), 3);
    }

    #[test]
    fn pool_variances_are_averaged() {
        let mut reg = registry(vec![unknown(1, 0.2, -2.0), unknown(2, 0.6, -4.0)]);
        let novel = transfer_parameters(&mut reg, &[0.0, 0.0]).unwrap();
        for v in novel.variance_diag() {
            assert!((v - 0.4).abs() < 1e-15);
        }
        assert_eq!(novel.log_threshold(), Some(-3.0));
    }

    #[test]
    fn consecutive_ids() {
        let mut reg = registry(vec![unknown(1, 0.2, -2.0)]);
        let k = reg.next_novel_id();
        let a = reg.transfer_parameters(&[1.0, 1.0]).unwrap().class_id();
        let b = reg.transfer_parameters(&[2.0, 2.0]).unwrap().class_id();
        assert_eq!(a, k);
        assert_eq!(b, ClassId(k.0 + 1));
    }

    #[test]
    fn empty_pool_is_configuration_error() {
        let mut reg = registry(vec![]);
        assert!(matches!(
            reg.transfer_parameters(&[0.0, 0.0]),
            Err(DistributionError::EmptyTransferPool)
        ));
    }

    #[test]
    fn missing_threshold_reported() {
        let post = niw_update(&NiwParams::zero(2), &Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap()).unwrap();
        let bare = ClassDistribution::from_posterior(ClassId(1), &post, Origin::Validated).unwrap();
        let mut reg = registry(vec![bare]);
        assert!(matches!(
            reg.transfer_parameters(&[0.0, 0.0]),
            Err(DistributionError::MissingThreshold(ClassId(1)))
        ));
    }

    #[test]
    fn duplicate_ids_and_low_counter_rejected() {
        let a = unknown(1, 0.2, -2.0);
        let b = unknown(1, 0.3, -2.0);
        assert!(matches!(
            DistributionRegistry::new(CovarianceMode::Isometric, 2, vec![a.clone(), b], vec![]),
            Err(DistributionError::DuplicateClass(ClassId(1)))
        ));
        let reg = DistributionRegistry::new(CovarianceMode::Isometric, 2, vec![a], vec![]).unwrap();
        assert!(reg.clone().with_next_novel_id(ClassId(1)).is_err());
        assert_eq!(reg.with_next_novel_id(ClassId(10)).unwrap().next_novel_id(), ClassId(10));
    }
}
