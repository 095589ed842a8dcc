//! Adam with bias correction.
//!
//! Gradients arrive as plain vectors aligned with
//! [`ModelParams::named_tensors`] order, which is how the trainer reads them
//! off a graph after a backward pass. A step validates every gradient before
//! mutating anything, so a non-finite gradient aborts with the parameters
//! untouched and the offending tensor named.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_mismatch, Error, Result};
use crate::math::sqrt;
use crate::network::ModelParams;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| t.numel())
            .collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over all parameters. `grads` must align with
/// [`ModelParams::named_tensors`]: same tensor count, same element counts.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    {
        let named = params.named_tensors();
        if grads.len() != named.len() {
            return Err(shape_mismatch(
                "adam",
                alloc::format!(
                    "{} gradient tensors vs {} parameters",
                    grads.len(),
                    named.len()
                ),
            ));
        }
        for ((name, tensor), grad) in named.iter().zip(grads) {
            if grad.len() != tensor.numel() {
                return Err(shape_mismatch(
                    "adam",
                    alloc::format!(
                        "{name}: {} gradient values vs {} elements",
                        grad.len(),
                        tensor.numel()
                    ),
                ));
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: name.to_string(),
                });
            }
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - crate::math::pow(config.beta1, t);
    let bias2 = 1.0 - crate::math::pow(config.beta2, t);

    for (i, (_, tensor)) in params.named_tensors_mut().into_iter().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            *p -= config.learning_rate * m_hat / (sqrt(v_hat) + config.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, NetworkConfig};

    fn tiny_params() -> ModelParams {
        let config = NetworkConfig {
            base_channels: 2,
            residual_blocks: vec![(1, 1)],
            ..NetworkConfig::default()
        };
        init_params(&config, 0).unwrap()
    }

    fn grads_like(params: &ModelParams, fill: f64) -> Vec<Vec<f64>> {
        params
            .named_tensors()
            .iter()
            .map(|(_, t)| vec![fill; t.numel()])
            .collect()
    }

    #[test]
    fn first_step_matches_hand_calculation() {
        // with g = 1 everywhere, bias correction cancels exactly:
        // m_hat = 1, v_hat = 1, so p -= lr / (1 + eps)
        let mut params = tiny_params();
        let before = params.named_tensors()[0].1.data()[0];
        let grads = grads_like(&params, 1.0);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
        let after = params.named_tensors()[0].1.data()[0];
        assert!(
            ((before - after) - 0.005).abs() < 1e-9,
            "step size {}",
            before - after
        );
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = tiny_params();
        let snapshot: Vec<Vec<f64>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        let grads = grads_like(&params, 0.0);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
        for ((_, t), before) in params.named_tensors().iter().zip(&snapshot) {
            assert_eq!(t.data(), before.as_slice());
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut params = tiny_params();
        let snapshot: Vec<Vec<f64>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        let mut grads = grads_like(&params, 1.0);
        let n_tensors = grads.len();
        grads[n_tensors - 1][0] = f64::NAN;
        let mut state = AdamState::new(&params);
        let err = adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref param } if param == "head.kernel"));
        assert_eq!(state.step_count(), 0);
        for ((_, t), before) in params.named_tensors().iter().zip(&snapshot) {
            assert_eq!(t.data(), before.as_slice(), "no partial update");
        }
    }

    #[test]
    fn rejects_misaligned_gradients() {
        let mut params = tiny_params();
        let mut state = AdamState::new(&params);
        let grads = vec![vec![0.0; 1]];
        assert!(adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).is_err());
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize f(p) = p² elementwise on one real tensor by feeding 2p
        let mut params = tiny_params();
        let mut state = AdamState::new(&params);
        let config = AdamConfig::default();
        let objective = |p: &ModelParams| -> f64 {
            p.named_tensors()
                .iter()
                .flat_map(|(_, t)| t.data())
                .map(|v| v * v)
                .sum()
        };
        let start = objective(&params);
        for _ in 0..500 {
            let grads: Vec<Vec<f64>> = params
                .named_tensors()
                .iter()
                .map(|(_, t)| t.data().iter().map(|v| 2.0 * v).collect())
                .collect();
            adam_step(&mut params, &grads, &mut state, &config).unwrap();
        }
        let end = objective(&params);
        assert!(end < start * 0.05, "objective {start} -> {end}");
    }
}
