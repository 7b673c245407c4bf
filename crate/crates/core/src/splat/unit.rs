use super::config::SplatConfig;
use super::ops::{
    cardinal_fuse, cardinal_fuse_backward, channel_stats, r_softmax, r_softmax_backward, weighted_fuse,
    weighted_fuse_backward, SplitLogits, SplitWeights,
};
use crate::error::{Error, Result};
use crate::nn::{join, missing_cache, AvgPool2d, BatchNorm, Conv2d, Ctx, Dense, Module, Parameter, Relu};
use crate::ops::{global_avg_pool_backward, Mode, PoolOptions};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

/// 3×3 stride-2 average pool used for in-unit downsampling.
pub fn downsample_pool(stride: usize) -> PoolOptions {
    PoolOptions::new(3, stride, 1)
}

/// Deliberate defects for mutation testing of the verification suites.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Negates the split weights in the weighted fusion.
    FlipFuseSign,
}

/// Normalisation parameters and running statistics of one BN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T: Scalar = f64> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> BnParams<T> {
    fn of(bn: &BatchNorm<T>) -> Self {
        BnParams {
            gamma: bn.gamma.value.clone(),
            beta: bn.beta.value.clone(),
            mean: bn.running.mean.clone(),
            var: bn.running.var.clone(),
        }
    }

    fn store(&self, bn: &mut BatchNorm<T>, what: &'static str) -> Result<()> {
        set(&mut bn.gamma.value, &self.gamma, what)?;
        set(&mut bn.beta.value, &self.beta, what)?;
        set(&mut bn.running.mean, &self.mean, what)?;
        set(&mut bn.running.var, &self.var, what)
    }

    /// Random affine terms and positive running statistics.
    pub fn random(channels: usize, rng: &mut RngState) -> Self {
        BnParams {
            gamma: Tensor::uniform(&[channels], 0.5, 1.5, rng),
            beta: Tensor::randn(&[channels], 0.2, rng),
            mean: Tensor::randn(&[channels], 0.2, rng),
            var: Tensor::uniform(&[channels], 0.5, 2.0, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T: Scalar = f64> {
    /// `[inner, C/K]`, grouped by cardinality.
    pub fc1: Tensor<T>,
    /// Present only when the head has no normalisation.
    pub fc1_bias: Option<Tensor<T>>,
    pub bn: Option<BnParams<T>>,
    /// `[C·R, inner/K]`, grouped by cardinality.
    pub fc2: Tensor<T>,
    pub fc2_bias: Tensor<T>,
}

/// Layout-agnostic snapshot of a unit's tensors. Whether group `g` means
/// `r·K + k` or `k·R + r` depends on which forward path consumes it.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatParams<T: Scalar = f64> {
    /// `[W, Cin, 1, 1]`
    pub conv1: Tensor<T>,
    pub bn1: BnParams<T>,
    /// `[C·R, W/G, 3, 3]`
    pub conv2: Tensor<T>,
    pub bn2: BnParams<T>,
    pub head: Option<HeadParams<T>>,
}

impl<T: Scalar> SplatParams<T> {
    /// Every tensor random, including normalisation terms, for layout tests.
    pub fn random(cfg: &SplatConfig, rng: &mut RngState) -> Self {
        let g = cfg.groups();
        let w = cfg.transform_width;
        let cr = cfg.split_channels();
        let k = cfg.cardinality;
        let head = cfg.attention.then(|| {
            let inner = cfg.attention_inner;
            HeadParams {
                fc1: Tensor::randn(
                    &[inner, cfg.group_width()],
                    (1.0 / cfg.group_width() as f64).sqrt(),
                    rng,
                ),
                fc1_bias: (!cfg.attention_bn).then(|| Tensor::randn(&[inner], 0.1, rng)),
                bn: cfg.attention_bn.then(|| BnParams::random(inner, rng)),
                fc2: Tensor::randn(&[cr, inner / k], (1.0 / (inner / k) as f64).sqrt(), rng),
                fc2_bias: Tensor::randn(&[cr], 0.1, rng),
            }
        });
        SplatParams {
            conv1: Tensor::randn(&[w, cfg.in_channels, 1, 1], (1.0 / cfg.in_channels as f64).sqrt(), rng),
            bn1: BnParams::random(w, rng),
            conv2: Tensor::randn(&[cr, w / g, 3, 3], (1.0 / (9 * w / g) as f64).sqrt(), rng),
            bn2: BnParams::random(cr, rng),
            head,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        let bn = |p: &str, b: &BnParams<T>, f: &mut dyn FnMut(&str, &Tensor<T>)| {
            f(&format!("{p}.gamma"), &b.gamma);
            f(&format!("{p}.beta"), &b.beta);
            f(&format!("{p}.running_mean"), &b.mean);
            f(&format!("{p}.running_var"), &b.var);
        };
        f("conv1.weight", &self.conv1);
        bn("bn1", &self.bn1, f);
        f("conv2.weight", &self.conv2);
        bn("bn2", &self.bn2, f);
        if let Some(h) = &self.head {
            f("fc1.weight", &h.fc1);
            if let Some(b) = &h.fc1_bias {
                f("fc1.bias", b);
            }
            if let Some(b) = &h.bn {
                bn("bn_fc", b, f);
            }
            f("fc2.weight", &h.fc2);
            f("fc2.bias", &h.fc2_bias);
        }
    }
}

fn set<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, what: &'static str) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(Error::shape(
            what,
            format!("expected {:?}, got {:?}", dst.shape(), src.shape()),
        ));
    }
    *dst = src.clone();
    Ok(())
}

#[derive(Debug, Clone)]
struct Head<T: Scalar> {
    fc1: Dense<T>,
    bn: Option<BatchNorm<T>>,
    relu: Relu<T>,
    fc2: Dense<T>,
}

#[derive(Debug, Clone)]
struct AttentionCache<T: Scalar> {
    u: Tensor<T>,
    fused_shape: Vec<usize>,
    weights: SplitWeights<T>,
}

/// Radix-major Split-Attention unit: unified 1×1 conv, one 3×3 conv with
/// `K·R` groups, grouped attention FCs. The residual connection lives in the
/// enclosing block.
#[derive(Debug, Clone)]
pub struct SplatUnit<T: Scalar = f64> {
    pub cfg: SplatConfig,
    pub fault: Fault,
    conv1: Conv2d<T>,
    bn1: BatchNorm<T>,
    relu1: Relu<T>,
    pre_pool: Option<AvgPool2d>,
    conv2: Conv2d<T>,
    bn2: BatchNorm<T>,
    relu2: Relu<T>,
    head: Option<Head<T>>,
    post_pool: Option<AvgPool2d>,
    cache: Option<AttentionCache<T>>,
    u_shape: Option<Vec<usize>>,
    last_attention: Option<SplitWeights<T>>,
}

impl<T: Scalar> SplatUnit<T> {
    pub fn new(name: &str, cfg: SplatConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{name}: {m}")),
            other => other,
        })?;
        let g = cfg.groups();
        let w = cfg.transform_width;
        let cr = cfg.split_channels();
        let k = cfg.cardinality;
        let downsample = cfg.stride > 1;
        let head = cfg.attention.then(|| Head {
            fc1: Dense::new(
                &join(name, "fc1"),
                cfg.channels,
                cfg.attention_inner,
                k,
                !cfg.attention_bn,
                rng,
            ),
            bn: cfg
                .attention_bn
                .then(|| BatchNorm::new(&join(name, "bn_fc"), cfg.attention_inner)),
            relu: Relu::default(),
            fc2: Dense::new(&join(name, "fc2"), cfg.attention_inner, cr, k, true, rng),
        });
        Ok(SplatUnit {
            cfg,
            fault: Fault::None,
            conv1: Conv2d::new(&join(name, "conv1"), cfg.in_channels, w, 1, 1, 0, 1, false, rng),
            bn1: BatchNorm::new(&join(name, "bn1"), w),
            relu1: Relu::default(),
            pre_pool: (downsample && cfg.fast).then(|| AvgPool2d::new(downsample_pool(cfg.stride))),
            conv2: Conv2d::new(&join(name, "conv2"), w, cr, 3, 1, 1, g, false, rng),
            bn2: BatchNorm::new(&join(name, "bn2"), cr),
            relu2: Relu::default(),
            head,
            post_pool: (downsample && !cfg.fast).then(|| AvgPool2d::new(downsample_pool(cfg.stride))),
            cache: None,
            u_shape: None,
            last_attention: None,
        })
    }

    /// Builds a unit holding exactly `params` (interpreted radix-major).
    pub fn from_params(name: &str, cfg: SplatConfig, params: &SplatParams<T>) -> Result<Self> {
        let mut unit = SplatUnit::new(name, cfg, &mut RngState::new(0))?;
        unit.load_params(params)?;
        Ok(unit)
    }

    pub fn params(&self) -> SplatParams<T> {
        SplatParams {
            conv1: self.conv1.weight.value.clone(),
            bn1: BnParams::of(&self.bn1),
            conv2: self.conv2.weight.value.clone(),
            bn2: BnParams::of(&self.bn2),
            head: self.head.as_ref().map(|h| HeadParams {
                fc1: h.fc1.weight.value.clone(),
                fc1_bias: h.fc1.bias.as_ref().map(|b| b.value.clone()),
                bn: h.bn.as_ref().map(BnParams::of),
                fc2: h.fc2.weight.value.clone(),
                fc2_bias: h.fc2.bias.as_ref().expect("fc2 always has a bias").value.clone(),
            }),
        }
    }

    pub fn load_params(&mut self, p: &SplatParams<T>) -> Result<()> {
        set(&mut self.conv1.weight.value, &p.conv1, "splat conv1")?;
        p.bn1.store(&mut self.bn1, "splat bn1")?;
        set(&mut self.conv2.weight.value, &p.conv2, "splat conv2")?;
        p.bn2.store(&mut self.bn2, "splat bn2")?;
        match (&mut self.head, &p.head) {
            (None, None) => Ok(()),
            (Some(h), Some(ph)) => {
                set(&mut h.fc1.weight.value, &ph.fc1, "splat fc1")?;
                match (&mut h.fc1.bias, &ph.fc1_bias) {
                    (None, None) => {}
                    (Some(b), Some(pb)) => set(&mut b.value, pb, "splat fc1 bias")?,
                    _ => return Err(Error::shape("splat fc1 bias", "presence mismatch")),
                }
                match (&mut h.bn, &ph.bn) {
                    (None, None) => {}
                    (Some(b), Some(pb)) => pb.store(b, "splat bn_fc")?,
                    _ => return Err(Error::shape("splat bn_fc", "presence mismatch")),
                }
                set(&mut h.fc2.weight.value, &ph.fc2, "splat fc2")?;
                let b = h.fc2.bias.as_mut().expect("fc2 always has a bias");
                set(&mut b.value, &ph.fc2_bias, "splat fc2 bias")
            }
            _ => Err(Error::shape("splat head", "attention presence mismatch")),
        }
    }

    /// Attention weights from the most recent forward pass.
    pub fn last_attention(&self) -> Option<&SplitWeights<T>> {
        self.last_attention.as_ref()
    }

    /// The split-transform output `U`, radix-major.
    fn transform(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let mut h = self.conv1.forward(x, ctx)?;
        h = self.bn1.forward(&h, ctx)?;
        h = self.relu1.forward(&h, ctx)?;
        if let Some(p) = &mut self.pre_pool {
            h = p.forward(&h, ctx)?;
        }
        h = self.conv2.forward(&h, ctx)?;
        h = self.bn2.forward(&h, ctx)?;
        self.relu2.forward(&h, ctx)
    }

    fn transform_backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.relu2.backward(g)?;
        g = self.bn2.backward(&g)?;
        g = self.conv2.backward(&g)?;
        if let Some(p) = &mut self.pre_pool {
            g = p.backward(&g)?;
        }
        g = self.relu1.backward(&g)?;
        g = self.bn1.backward(&g)?;
        self.conv1.backward(&g)
    }
}

impl<T: Scalar> Module<T> for SplatUnit<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let (_, cin, _, _) = x.dims4("splat")?;
        if cin != self.cfg.in_channels {
            return Err(Error::shape(
                "splat",
                format!("expected {} input channels, got {cin}", self.cfg.in_channels),
            ));
        }
        let (r, k) = (self.cfg.radix, self.cfg.cardinality);
        let u = self.transform(x, ctx)?;
        let mut v = match &mut self.head {
            None => {
                self.u_shape = ctx.is_train().then(|| u.shape().to_vec());
                cardinal_fuse(&u, r, k)?
            }
            Some(head) => {
                let fused = cardinal_fuse(&u, r, k)?;
                let s = channel_stats(&fused)?;
                let mut z = head.fc1.forward(&s, ctx)?;
                if let Some(bn) = &mut head.bn {
                    z = bn.forward(&z, ctx)?;
                }
                z = head.relu.forward(&z, ctx)?;
                z = head.fc2.forward(&z, ctx)?;
                let a = r_softmax(&SplitLogits::from_head(&z, r, k)?)?;
                let v = weighted_fuse(&u, &a)?;
                self.last_attention = Some(a.clone());
                if ctx.is_train() {
                    self.cache = Some(AttentionCache {
                        u,
                        fused_shape: fused.shape().to_vec(),
                        weights: a,
                    });
                }
                v
            }
        };
        if self.fault == Fault::FlipFuseSign {
            v = v.scale(-T::one());
        }
        if let Some(p) = &mut self.post_pool {
            v = p.forward(&v, ctx)?;
        }
        Ok(v)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_out.clone();
        if let Some(p) = &mut self.post_pool {
            g = p.backward(&g)?;
        }
        if self.fault == Fault::FlipFuseSign {
            g = g.scale(-T::one());
        }
        let r = self.cfg.radix;
        let du = match &mut self.head {
            None => {
                self.u_shape.take().ok_or_else(|| missing_cache("splat"))?;
                cardinal_fuse_backward(&g, r)?
            }
            Some(head) => {
                let c = self.cache.take().ok_or_else(|| missing_cache("splat"))?;
                let (mut du, da) = weighted_fuse_backward(&c.u, &c.weights, &g)?;
                let dl = r_softmax_backward(&c.weights, &da)?.0;
                let n = dl.shape()[0];
                let mut dz = head.fc2.backward(&dl.into_reshaped(&[n, self.cfg.split_channels()])?)?;
                dz = head.relu.backward(&dz)?;
                if let Some(bn) = &mut head.bn {
                    dz = bn.backward(&dz)?;
                }
                let ds = head.fc1.backward(&dz)?;
                let dfused = global_avg_pool_backward(&c.fused_shape, &ds)?;
                du.add_assign(&cardinal_fuse_backward(&dfused, r)?)?;
                du
            }
        };
        self.transform_backward(&du)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some(h) = &self.head {
            h.fc1.visit_params(f);
            if let Some(bn) = &h.bn {
                bn.visit_params(f);
            }
            h.fc2.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.conv1.visit_params_mut(f);
        self.bn1.visit_params_mut(f);
        self.conv2.visit_params_mut(f);
        self.bn2.visit_params_mut(f);
        if let Some(h) = &mut self.head {
            h.fc1.visit_params_mut(f);
            if let Some(bn) = &mut h.bn {
                bn.visit_params_mut(f);
            }
            h.fc2.visit_params_mut(f);
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
        if let Some(bn) = self.head.as_ref().and_then(|h| h.bn.as_ref()) {
            bn.visit_buffers(f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.bn1.visit_buffers_mut(f);
        self.bn2.visit_buffers_mut(f);
        if let Some(bn) = self.head.as_mut().and_then(|h| h.bn.as_mut()) {
            bn.visit_buffers_mut(f);
        }
    }
}

/// Stateless radix-major forward. Train mode normalises with batch
/// statistics; the running statistics in `params` are left untouched.
pub fn forward_radix_major<T: Scalar>(
    x: &Tensor<T>,
    cfg: &SplatConfig,
    params: &SplatParams<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let mut unit = SplatUnit::from_params("splat", *cfg, params)?;
    let mut rng = RngState::new(0);
    unit.forward(x, &mut Ctx::new(mode, &mut rng))
}
