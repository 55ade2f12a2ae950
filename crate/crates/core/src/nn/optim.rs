//! SGD with momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use super::layers::ParamRole;
use super::network::Network;
use crate::error::{FbError, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to factor matrices.
    pub decay_factors: bool,
    /// Apply weight decay to batch-norm scale and shift.
    pub decay_norm: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_factors: true,
            decay_norm: false,
        }
    }
}

impl SgdConfig {
    fn decay_for(&self, role: ParamRole) -> f64 {
        let on = match role {
            ParamRole::Factor => self.decay_factors,
            ParamRole::Norm => self.decay_norm,
            ParamRole::Weight | ParamRole::Bias => true,
        };
        if on {
            self.weight_decay
        } else {
            0.0
        }
    }
}

/// `v ← μ·v + g + λ·p`, then `p ← p − lr·v`.
pub fn sgd_update<T: Element>(value: &mut [T], grad: &[T], velocity: &mut [T], lr: f64, momentum: f64, decay: f64) {
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(decay));
    for ((p, &g), v) in value.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
}

/// Momentum buffers for every trainable tensor of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T: Element = f64> {
    pub config: SgdConfig,
    velocity: Vec<Tensor<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(config: SgdConfig, net: &mut Network<T>) -> Self {
        let velocity = net
            .params()
            .into_iter()
            .map(|(_, _, s)| Tensor::zeros(s.value.shape()))
            .collect();
        Sgd { config, velocity }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.velocity
    }

    /// One update with learning rate `lr`; layers with an active factor term
    /// use `lr·fb_multiplier`. Fails with a numeric error if any parameter
    /// becomes non-finite.
    pub fn step(&mut self, net: &mut Network<T>, lr: f64, fb_multiplier: f64) -> Result<()> {
        let params = net.params();
        if params.len() != self.velocity.len() {
            return Err(FbError::Contract(format!(
                "optimizer holds {} buffers for {} parameters",
                self.velocity.len(),
                params.len()
            )));
        }
        for ((layer, fb, slot), v) in params.into_iter().zip(&mut self.velocity) {
            let rate = if fb { lr * fb_multiplier } else { lr };
            sgd_update(
                slot.value.data_mut(),
                slot.grad.data(),
                v.data_mut(),
                rate,
                self.config.momentum,
                self.config.decay_for(slot.role),
            );
            if !slot.value.all_finite() {
                return Err(FbError::Numeric(format!(
                    "parameter of layer {layer} became non-finite"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = [0.5, -1.0];
        let mut v = [0.0; 2];
        sgd_update(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(p, [0.5, -1.0]);
    }

    #[test]
    fn plain_step() {
        let mut p = [3.0];
        let mut v = [0.0];
        sgd_update(&mut p, &[2.0], &mut v, 1.0, 0.0, 0.0);
        assert_eq!(p, [1.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let (lr, g) = (0.1, 2.0);
        let mut p = [0.0f64];
        let mut v = [0.0];
        sgd_update(&mut p, &[g], &mut v, lr, 0.9, 0.0);
        sgd_update(&mut p, &[g], &mut v, lr, 0.9, 0.0);
        assert!((p[0] + lr * (g + 1.9 * g)).abs() < 1e-15);
    }

    #[test]
    fn decay_pulls_toward_zero() {
        let mut p = [1.0f64];
        let mut v = [0.0];
        sgd_update(&mut p, &[0.0], &mut v, 0.5, 0.0, 0.1);
        assert!((p[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn decay_roles() {
        let cfg = SgdConfig::default();
        assert_eq!(cfg.decay_for(ParamRole::Factor), 1e-4);
        assert_eq!(cfg.decay_for(ParamRole::Norm), 0.0);
    }
}
