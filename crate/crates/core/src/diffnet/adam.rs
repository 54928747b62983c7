use serde::{Deserialize, Serialize};

use super::{NetworkError, NetworkGrads, NetworkParams};
use crate::error::ShapeError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Gradients for everything the trainer optimizes: the network plus the flat
/// class-mean and log-variance vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub network: NetworkGrads,
    pub means: Vec<f64>,
    pub log_variances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }
}

/// Adam moment accumulators. Block order: for each layer its weights then
/// its bias, then the means, then the log-variances.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    blocks: Vec<Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &NetworkParams, n_means: usize, n_log_variances: usize) -> Self {
        let mut blocks = Vec::with_capacity(params.layers.len() * 2 + 2);
        for layer in &params.layers {
            blocks.push(Moments::new(layer.weights.as_slice().len()));
            blocks.push(Moments::new(layer.bias.len()));
        }
        blocks.push(Moments::new(n_means));
        blocks.push(Moments::new(n_log_variances));
        Self { config, t: 0, blocks }
    }
}

fn block_name(index: usize, n_layers: usize) -> String {
    if index < 2 * n_layers {
        let kind = if index % 2 == 0 { "weights" } else { "bias" };
        format!("layer {} {kind}", index / 2)
    } else if index == 2 * n_layers {
        "means".to_string()
    } else {
        "log_variances".to_string()
    }
}

/// One bias-corrected Adam step over the network and distribution parameters.
/// Nothing is modified if any gradient is non-finite or mis-shaped.
pub fn adam_step(
    params: &mut NetworkParams,
    means: &mut [f64],
    log_variances: &mut [f64],
    grads: &GradientBundle,
    state: &mut AdamState,
) -> Result<(), NetworkError> {
    let n_layers = params.layers.len();
    if grads.network.layers.len() != n_layers {
        return Err(ShapeError::new("gradient layer count", n_layers, grads.network.layers.len()).into());
    }
    if state.blocks.len() != 2 * n_layers + 2 {
        return Err(ShapeError::new("optimizer block count", 2 * n_layers + 2, state.blocks.len()).into());
    }

    let mut pairs: Vec<(&mut [f64], &[f64])> = Vec::with_capacity(2 * n_layers + 2);
    for (layer, g) in params.layers.iter_mut().zip(&grads.network.layers) {
        pairs.push((layer.weights.as_mut_slice(), g.weights.as_slice()));
        pairs.push((layer.bias.as_mut_slice(), g.bias.as_slice()));
    }
    pairs.push((means, &grads.means));
    pairs.push((log_variances, &grads.log_variances));

    for (i, ((p, g), m)) in pairs.iter().zip(&state.blocks).enumerate() {
        if p.len() != g.len() || m.first.len() != p.len() {
            return Err(ShapeError::new(block_name(i, n_layers), p.len(), g.len()).into());
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(NetworkError::NonFiniteGradient {
                block: block_name(i, n_layers),
            });
        }
    }

    state.t += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.t as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    for ((p, g), m) in pairs.into_iter().zip(state.blocks.iter_mut()) {
        for (((p, &g), m1), m2) in p
            .iter_mut()
            .zip(g)
            .zip(m.first.iter_mut())
            .zip(m.second.iter_mut())
        {
            *m1 = beta1 * *m1 + (1.0 - beta1) * g;
            *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
            let m_hat = *m1 / bias1;
            let v_hat = *m2 / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    params.bump_generation();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{init_params, Activation, NetworkSpec};

    fn tiny() -> NetworkParams {
        init_params(&NetworkSpec::new(2, vec![3, 1], Activation::Relu, 3)).unwrap()
    }

    fn zero_bundle(params: &NetworkParams, n_means: usize, n_lv: usize) -> GradientBundle {
        GradientBundle {
            network: NetworkGrads::zeros_like(params),
            means: vec![0.0; n_means],
            log_variances: vec![0.0; n_lv],
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut params = tiny();
        let before = params.clone();
        let mut means = vec![0.3, -0.2];
        let mut lv = vec![0.0];
        let mut state = AdamState::new(AdamConfig::default(), &params, 2, 1);
        let grads = zero_bundle(&params, 2, 1);
        adam_step(&mut params, &mut means, &mut lv, &grads, &mut state).unwrap();
        assert_eq!(params, before);
        assert_eq!(means, vec![0.3, -0.2]);
        assert_eq!(lv, vec![0.0]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut params = tiny();
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(cfg, &params, 0, 1);
        let mut grads = zero_bundle(&params, 0, 1);
        grads.log_variances[0] = -3.7;
        let mut lv = vec![1.0];
        adam_step(&mut params, &mut [], &mut lv, &grads, &mut state).unwrap();
        // At t=1: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps).
        let expected = 1.0 + cfg.lr * 3.7 / (3.7 + cfg.eps);
        assert!((lv[0] - expected).abs() < 1e-15);
        assert!((lv[0] - (1.0 + cfg.lr)).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_names_block_and_mutates_nothing() {
        let mut params = tiny();
        let before = params.clone();
        let mut state = AdamState::new(AdamConfig::default(), &params, 2, 1);
        let mut grads = zero_bundle(&params, 2, 1);
        grads.network.layers[0].weights.set(1, 0, 1.0);
        grads.means[1] = f64::NAN;
        let err = adam_step(&mut params, &mut [0.0, 0.0], &mut [0.0], &grads, &mut state).unwrap_err();
        match err {
            NetworkError::NonFiniteGradient { block } => assert_eq!(block, "means"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(params, before);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut params = tiny();
            let mut state = AdamState::new(AdamConfig::default(), &params, 1, 1);
            let mut means = vec![0.0];
            let mut lv = vec![0.0];
            for step in 0..20 {
                let mut grads = zero_bundle(&params, 1, 1);
                for (i, w) in grads.network.layers[0].weights.as_mut_slice().iter_mut().enumerate() {
                    *w = ((step * 7 + i) as f64).sin();
                }
                grads.means[0] = (step as f64).cos();
                grads.log_variances[0] = 0.1 * step as f64;
                adam_step(&mut params, &mut means, &mut lv, &grads, &mut state).unwrap();
            }
            (params, means, lv)
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert_eq!(a.1[0].to_bits(), b.1[0].to_bits());
        assert_eq!(a.2[0].to_bits(), b.2[0].to_bits());
    }
}
