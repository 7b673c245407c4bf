//! Stateful layers wrapping the kernels in [`crate::ops`].

use super::module::{missing_cache, Ctx, Module};
use super::param::{join, Parameter};
use crate::error::Result;
use crate::ops::{self, BatchNormCache, Conv2dOptions, PoolOptions, RunningStats};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};
use crate::training::dropblock_mask;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Kaiming (He) normal initialisation for a ReLU network: `std = sqrt(2 / fan_in)`.
pub fn kaiming_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut RngState) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar = f64> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub opts: Conv2dOptions,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        rng: &mut RngState,
    ) -> Self {
        let cin_g = in_channels / groups.max(1);
        let shape = [out_channels, cin_g, kernel, kernel];
        let weight = Parameter::new(
            join(name, "weight"),
            kaiming_normal(&shape, cin_g * kernel * kernel, rng),
            true,
        );
        let bias = bias.then(|| Parameter::new(join(name, "bias"), Tensor::zeros(&[out_channels]), false));
        Conv2d {
            weight,
            bias,
            opts: Conv2dOptions::new(stride, padding, groups),
            input: None,
        }
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let y = ops::conv2d(x, &self.weight.value, self.bias.as_ref().map(|b| &b.value), self.opts)?;
        self.input = ctx.is_train().then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_cache("conv2d"))?;
        let g = ops::conv2d_backward(&x, &self.weight.value, self.bias.is_some(), self.opts, grad_out)?;
        self.weight.accumulate(&g.weight)?;
        if let (Some(b), Some(gb)) = (self.bias.as_mut(), g.bias.as_ref()) {
            b.accumulate(gb)?;
        }
        Ok(g.input)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T: Scalar = f64> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running: RunningStats<T>,
    pub momentum: f64,
    pub eps: f64,
    mean_name: String,
    var_name: String,
    cache: Option<BatchNormCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Parameter::new(join(name, "gamma"), Tensor::ones(&[channels]), false),
            beta: Parameter::new(join(name, "beta"), Tensor::zeros(&[channels]), false),
            running: RunningStats::new(channels),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            mean_name: join(name, "running_mean"),
            var_name: join(name, "running_var"),
            cache: None,
        }
    }

    /// Sets the scale to zero, silencing the branch this normalisation ends.
    pub fn zero_init(mut self) -> Self {
        self.gamma.value.fill(T::zero());
        self
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let (y, cache) = ops::batch_norm(
            x,
            &self.gamma.value,
            &self.beta.value,
            &mut self.running,
            ctx.mode,
            self.momentum,
            self.eps,
        )?;
        self.cache = ctx.is_train().then_some(cache);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batch_norm"))?;
        let g = ops::batch_norm_backward(&cache, &self.gamma.value, grad_out)?;
        self.gamma.accumulate(&g.gamma)?;
        self.beta.accumulate(&g.beta)?;
        Ok(g.input)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&self.mean_name, &self.running.mean);
        f(&self.var_name, &self.running.var);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&self.mean_name, &mut self.running.mean);
        f(&self.var_name, &mut self.running.var);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T: Scalar = f64> {
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Module<T> for Relu<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        self.input = ctx.is_train().then(|| x.clone());
        Ok(ops::relu(x))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_cache("relu"))?;
        ops::relu_backward(&x, grad_out)
    }

    fn visit_params(&self, _f: &mut dyn FnMut(&Parameter<T>)) {}

    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&mut Parameter<T>)) {}
}

#[derive(Debug, Clone)]
pub struct AvgPool2d {
    pub opts: PoolOptions,
    input_shape: Option<Vec<usize>>,
}

impl AvgPool2d {
    pub fn new(opts: PoolOptions) -> Self {
        AvgPool2d {
            opts,
            input_shape: None,
        }
    }
}

impl<T: Scalar> Module<T> for AvgPool2d {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        self.input_shape = ctx.is_train().then(|| x.shape().to_vec());
        ops::avg_pool2d(x, self.opts)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.take().ok_or_else(|| missing_cache("avg_pool2d"))?;
        ops::avg_pool2d_backward(&shape, self.opts, grad_out)
    }

    fn visit_params(&self, _f: &mut dyn FnMut(&Parameter<T>)) {}

    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&mut Parameter<T>)) {}
}

#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub opts: PoolOptions,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(opts: PoolOptions) -> Self {
        MaxPool2d { opts, cache: None }
    }
}

impl<T: Scalar> Module<T> for MaxPool2d {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let (y, arg) = ops::max_pool2d(x, self.opts)?;
        self.cache = ctx.is_train().then(|| (x.shape().to_vec(), arg));
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, arg) = self.cache.take().ok_or_else(|| missing_cache("max_pool2d"))?;
        ops::max_pool2d_backward(&shape, &arg, grad_out)
    }

    fn visit_params(&self, _f: &mut dyn FnMut(&Parameter<T>)) {}

    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&mut Parameter<T>)) {}
}

#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<Vec<usize>>,
}

impl<T: Scalar> Module<T> for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        self.input_shape = ctx.is_train().then(|| x.shape().to_vec());
        ops::global_avg_pool(x)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self
            .input_shape
            .take()
            .ok_or_else(|| missing_cache("global_avg_pool"))?;
        ops::global_avg_pool_backward(&shape, grad_out)
    }

    fn visit_params(&self, _f: &mut dyn FnMut(&Parameter<T>)) {}

    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&mut Parameter<T>)) {}
}

/// Grouped fully-connected layer on `[N, F]` inputs.
#[derive(Debug, Clone)]
pub struct Dense<T: Scalar = f64> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub groups: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(
        name: &str,
        in_features: usize,
        out_features: usize,
        groups: usize,
        bias: bool,
        rng: &mut RngState,
    ) -> Self {
        let fg = in_features / groups.max(1);
        Dense {
            weight: Parameter::new(join(name, "weight"), kaiming_normal(&[out_features, fg], fg, rng), true),
            bias: bias.then(|| Parameter::new(join(name, "bias"), Tensor::zeros(&[out_features]), false)),
            groups,
            input: None,
        }
    }
}

impl<T: Scalar> Module<T> for Dense<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let y = ops::fully_connected(x, &self.weight.value, self.bias.as_ref().map(|b| &b.value), self.groups)?;
        self.input = ctx.is_train().then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_cache("dense"))?;
        let g = ops::fully_connected_backward(&x, &self.weight.value, self.bias.is_some(), self.groups, grad_out)?;
        self.weight.accumulate(&g.weight)?;
        if let (Some(b), Some(gb)) = (self.bias.as_mut(), g.bias.as_ref()) {
            b.accumulate(gb)?;
        }
        Ok(g.input)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dropout<T: Scalar = f64> {
    pub p: f64,
    mask: Option<Tensor<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(p: f64) -> Self {
        Dropout { p, mask: None }
    }
}

impl<T: Scalar> Module<T> for Dropout<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let (y, mask) = ops::dropout(x, self.p, ctx.rng, ctx.mode)?;
        self.mask = ctx.is_train().then_some(mask);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.take().ok_or_else(|| missing_cache("dropout"))?;
        grad_out.mul(&mask)
    }

    fn visit_params(&self, _f: &mut dyn FnMut(&Parameter<T>)) {}

    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&mut Parameter<T>)) {}
}

/// Structured dropout zeroing square regions; see [`dropblock_mask`].
#[derive(Debug, Clone)]
pub struct DropBlock<T: Scalar = f64> {
    pub block_size: usize,
    pub drop_prob: f64,
    mask: Option<Tensor<T>>,
}

impl<T: Scalar> DropBlock<T> {
    pub fn new(block_size: usize, drop_prob: f64) -> Self {
        DropBlock {
            block_size,
            drop_prob,
            mask: None,
        }
    }
}

impl<T: Scalar> Module<T> for DropBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let mask: Tensor<T> = dropblock_mask(x.shape(), self.block_size, self.drop_prob, ctx.rng, ctx.mode)?;
        let y = x.mul(&mask)?;
        self.mask = ctx.is_train().then_some(mask);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.take().ok_or_else(|| missing_cache("dropblock"))?;
        grad_out.mul(&mask)
    }

    fn visit_params(&self, _f: &mut dyn FnMut(&Parameter<T>)) {}

    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&mut Parameter<T>)) {}
}

/// Closed set of layers that can appear in a [`Sequential`].
#[derive(Debug, Clone)]
pub enum Layer<T: Scalar = f64> {
    Conv(Conv2d<T>),
    Norm(BatchNorm<T>),
    Relu(Relu<T>),
    AvgPool(AvgPool2d),
    MaxPool(MaxPool2d),
}

impl<T: Scalar> Layer<T> {
    fn as_module(&mut self) -> &mut dyn Module<T> {
        match self {
            Layer::Conv(l) => l,
            Layer::Norm(l) => l,
            Layer::Relu(l) => l,
            Layer::AvgPool(l) => l,
            Layer::MaxPool(l) => l,
        }
    }

    fn as_module_ref(&self) -> &dyn Module<T> {
        match self {
            Layer::Conv(l) => l,
            Layer::Norm(l) => l,
            Layer::Relu(l) => l,
            Layer::AvgPool(l) => l,
            Layer::MaxPool(l) => l,
        }
    }
}

/// Layers applied in order; backward runs them in reverse.
#[derive(Debug, Clone, Default)]
pub struct Sequential<T: Scalar = f64> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Sequential { layers }
    }

    pub fn push(&mut self, layer: Layer<T>) {
        self.layers.push(layer);
    }
}

impl<T: Scalar> Module<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for l in &mut self.layers {
            cur = l.as_module().forward(&cur, ctx)?;
        }
        Ok(cur)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_out.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.as_module().backward(&g)?;
        }
        Ok(g)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        for l in &self.layers {
            l.as_module_ref().visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        for l in &mut self.layers {
            l.as_module().visit_params_mut(f);
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for l in &self.layers {
            l.as_module_ref().visit_buffers(f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for l in &mut self.layers {
            l.as_module().visit_buffers_mut(f);
        }
    }
}
