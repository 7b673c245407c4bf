use super::param::Parameter;
use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

/// Per-call forward state: the mode and the random stream consumed by
/// stochastic regularisers.
pub struct Ctx<'a> {
    pub mode: Mode,
    pub rng: &'a mut RngState,
}

impl<'a> Ctx<'a> {
    pub fn new(mode: Mode, rng: &'a mut RngState) -> Self {
        Ctx { mode, rng }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }
}

/// A layer with an explicit backward pass.
///
/// `forward` in train mode records whatever the backward pass needs;
/// `backward` consumes that record, accumulates parameter gradients and
/// returns the gradient with respect to the forward input. Eval-mode forwards
/// record nothing.
pub trait Module<T: Scalar> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>>;

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>));

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>));

    /// Non-trainable state (normalisation running statistics).
    fn visit_buffers(&self, _f: &mut dyn FnMut(&str, &Tensor<T>)) {}

    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&str, &mut Tensor<T>)) {}

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name.clone()));
        names
    }
}

pub(crate) fn missing_cache(layer: &str) -> Error {
    Error::config(format!(
        "{layer}: backward called without a preceding train-mode forward"
    ))
}
