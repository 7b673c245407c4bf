//! SGD with classical momentum and decay restricted to conv/FC weights.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::nn::{Module, Parameter};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// One update of a single parameter:
/// `g' = g + wd w` (decay-eligible only), `v = m v + g'`, `w = w - lr v`.
pub fn sgd_update<T: Scalar>(
    param: &mut Parameter<T>,
    velocity: &mut Tensor<T>,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    param.value.expect_same_shape(velocity, "sgd_update")?;
    let m = T::of(cfg.momentum);
    let wd = if param.decay_eligible {
        T::of(cfg.weight_decay)
    } else {
        T::zero()
    };
    let lr = T::of(lr);
    for ((w, v), &g) in param
        .value
        .data_mut()
        .iter_mut()
        .zip(velocity.data_mut())
        .zip(param.grad.data())
    {
        *v = m * *v + g + wd * *w;
        *w -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar = f64> {
    pub cfg: OptimizerConfig,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Sgd {
            cfg,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter of `module` from its accumulated
    /// gradients. Gradients are left untouched.
    pub fn step(&mut self, module: &mut dyn Module<T>, lr: f64) -> Result<()> {
        let mut result = Ok(());
        let cfg = self.cfg;
        let velocity = &mut self.velocity;
        module.visit_params_mut(&mut |p| {
            if result.is_err() {
                return;
            }
            let v = velocity
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            result = sgd_update(p, v, &cfg, lr);
        });
        result
    }

    pub fn velocities(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, name: &str, v: Tensor<T>) {
        self.velocity.insert(name.to_string(), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_skipped_for_ineligible_parameters() {
        let cfg = OptimizerConfig {
            momentum: 0.9,
            weight_decay: 0.5,
        };
        let mut gamma = Parameter::new("bn.gamma", Tensor::<f64>::full(&[3], 2.0), false);
        let mut v = Tensor::zeros(&[3]);
        sgd_update(&mut gamma, &mut v, &cfg, 0.1).unwrap();
        assert!(gamma.value.data().iter().all(|&w| w == 2.0));

        let mut w = Parameter::new("conv.weight", Tensor::<f64>::full(&[3], 2.0), true);
        let mut v = Tensor::zeros(&[3]);
        sgd_update(&mut w, &mut v, &cfg, 0.1).unwrap();
        assert!(w.value.data().iter().all(|&x| (x - 1.9).abs() < 1e-15));
    }

    #[test]
    fn quadratic_two_steps_follow_the_recurrence() {
        // f(w) = w^2 / 2, so g = w.
        let cfg = OptimizerConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut p = Parameter::new("w", Tensor::<f64>::full(&[1], 1.0), true);
        let mut v = Tensor::zeros(&[1]);
        let (mut w_ref, mut v_ref) = (1.0f64, 0.0f64);
        for _ in 0..2 {
            p.grad = p.value.clone();
            sgd_update(&mut p, &mut v, &cfg, 0.1).unwrap();
            v_ref = 0.9 * v_ref + w_ref;
            w_ref -= 0.1 * v_ref;
        }
        assert_eq!(p.value.data()[0], w_ref);
        assert_eq!(v.data()[0], v_ref);
        // Step 1: v = 1, w = 0.9. Step 2: v = 0.9 + 0.9 = 1.8, w = 0.9 - 0.18 = 0.72.
        assert!((w_ref - 0.72).abs() < 1e-15);
    }
}
