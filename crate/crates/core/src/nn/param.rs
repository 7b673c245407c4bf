use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// A trainable tensor with its accumulated gradient.
///
/// `decay_eligible` is true only for convolution and fully-connected weights;
/// biases and normalisation scale/shift are excluded from weight decay.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar = f64> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub decay_eligible: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, decay_eligible: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
            decay_eligible,
        }
    }

    pub fn accumulate(&mut self, g: &Tensor<T>) -> Result<()> {
        self.grad.add_assign(g)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Joins a path prefix and a leaf name with `.`.
pub fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}
