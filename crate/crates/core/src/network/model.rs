use super::config::{NetworkConfig, MIN_INPUT};
use super::plan::{BottleneckSpec, Interior, NetworkPlan, ShortcutSpec, StemSpec};
use crate::error::{Error, Result};
use crate::nn::{
    join, AvgPool2d, BatchNorm, Conv2d, Ctx, Dense, DropBlock, Dropout, GlobalAvgPool, Layer, MaxPool2d, Module,
    Parameter, Relu, Sequential,
};
use crate::ops::PoolOptions;
use crate::rng::RngState;
use crate::splat::SplatUnit;
use crate::tensor::{Scalar, Tensor};

fn conv_bn_relu<T: Scalar>(
    layers: &mut Vec<Layer<T>>,
    name: &str,
    idx: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    rng: &mut RngState,
) {
    let conv = join(name, &format!("conv{idx}"));
    layers.push(Layer::Conv(Conv2d::new(
        &conv,
        cin,
        cout,
        kernel,
        stride,
        kernel / 2,
        1,
        false,
        rng,
    )));
    layers.push(Layer::Norm(BatchNorm::new(&join(name, &format!("bn{idx}")), cout)));
    layers.push(Layer::Relu(Relu::default()));
}

pub fn build_stem<T: Scalar>(spec: &StemSpec, rng: &mut RngState) -> Sequential<T> {
    let mut layers = Vec::new();
    let w = spec.width;
    if spec.deep {
        conv_bn_relu(&mut layers, "stem", 1, spec.in_channels, w, 3, 2, rng);
        conv_bn_relu(&mut layers, "stem", 2, w, w, 3, 1, rng);
        conv_bn_relu(&mut layers, "stem", 3, w, 2 * w, 3, 1, rng);
    } else {
        conv_bn_relu(&mut layers, "stem", 1, spec.in_channels, 2 * w, 7, 2, rng);
    }
    layers.push(Layer::MaxPool(MaxPool2d::new(PoolOptions::new(3, 2, 1))));
    Sequential::new(layers)
}

pub fn build_shortcut<T: Scalar>(path: &str, spec: &ShortcutSpec, rng: &mut RngState) -> Sequential<T> {
    let name = join(path, "downsample");
    let mut layers = Vec::new();
    let conv_stride = if spec.avg_down && spec.stride > 1 {
        let mut pool = PoolOptions::new(spec.stride, spec.stride, 0);
        pool.count_includes_pad = false;
        layers.push(Layer::AvgPool(AvgPool2d::new(pool)));
        1
    } else {
        spec.stride
    };
    layers.push(Layer::Conv(Conv2d::new(
        &join(&name, "conv"),
        spec.in_channels,
        spec.out_channels,
        1,
        conv_stride,
        0,
        1,
        false,
        rng,
    )));
    layers.push(Layer::Norm(BatchNorm::new(&join(&name, "bn"), spec.out_channels)));
    Sequential::new(layers)
}

#[derive(Debug, Clone)]
pub enum BlockInterior<T: Scalar = f64> {
    Splat(Box<SplatUnit<T>>),
    Residual(Sequential<T>),
}

impl<T: Scalar> BlockInterior<T> {
    fn module(&mut self) -> &mut dyn Module<T> {
        match self {
            BlockInterior::Splat(u) => u.as_mut(),
            BlockInterior::Residual(s) => s,
        }
    }

    fn module_ref(&self) -> &dyn Module<T> {
        match self {
            BlockInterior::Splat(u) => u.as_ref(),
            BlockInterior::Residual(s) => s,
        }
    }
}

/// `ReLU(conv3(interior(x)) + shortcut(x))`, with the final BN scale zeroed.
#[derive(Debug, Clone)]
pub struct Bottleneck<T: Scalar = f64> {
    pub spec: BottleneckSpec,
    pub interior: BlockInterior<T>,
    conv3: Conv2d<T>,
    bn3: BatchNorm<T>,
    dropblock: Option<DropBlock<T>>,
    shortcut: Option<Sequential<T>>,
    out_relu: Relu<T>,
}

impl<T: Scalar> Bottleneck<T> {
    pub fn new(spec: &BottleneckSpec, rng: &mut RngState) -> Result<Self> {
        let path = spec.path.as_str();
        let (interior, width) = match &spec.interior {
            Interior::Splat(cfg) => (
                BlockInterior::Splat(Box::new(SplatUnit::new(&join(path, "splat"), *cfg, rng)?)),
                cfg.channels,
            ),
            Interior::Residual { width, groups } => {
                let mut layers = Vec::new();
                layers.push(Layer::Conv(Conv2d::new(
                    &join(path, "conv1"),
                    spec.in_channels,
                    *width,
                    1,
                    1,
                    0,
                    1,
                    false,
                    rng,
                )));
                layers.push(Layer::Norm(BatchNorm::new(&join(path, "bn1"), *width)));
                layers.push(Layer::Relu(Relu::default()));
                layers.push(Layer::Conv(Conv2d::new(
                    &join(path, "conv2"),
                    *width,
                    *width,
                    3,
                    spec.stride,
                    1,
                    *groups,
                    false,
                    rng,
                )));
                layers.push(Layer::Norm(BatchNorm::new(&join(path, "bn2"), *width)));
                layers.push(Layer::Relu(Relu::default()));
                (BlockInterior::Residual(Sequential::new(layers)), *width)
            }
        };
        let out = spec.out_channels();
        let shortcut = spec.shortcut.as_ref().map(|s| build_shortcut(path, s, rng));
        if shortcut.is_none() && (spec.in_channels != out || spec.stride != 1) {
            return Err(Error::Config(format!(
                "{path}: identity shortcut cannot map {} channels stride {} to {out} channels",
                spec.in_channels, spec.stride
            )));
        }
        Ok(Bottleneck {
            spec: spec.clone(),
            interior,
            conv3: Conv2d::new(&join(path, "conv3"), width, out, 1, 1, 0, 1, false, rng),
            bn3: BatchNorm::new(&join(path, "bn3"), out).zero_init(),
            dropblock: spec.dropblock.map(|d| DropBlock::new(d.block_size, d.drop_prob)),
            shortcut,
            out_relu: Relu::default(),
        })
    }

    /// Output with the residual branch removed: `ReLU(shortcut(x))`.
    pub fn forward_shortcut_only(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let s = match &mut self.shortcut {
            Some(sc) => sc.forward(x, ctx)?,
            None => x.clone(),
        };
        Ok(crate::ops::relu(&s))
    }
}

/// Largest odd block size that fits the feature map.
fn fit_block(block: usize, h: usize, w: usize) -> usize {
    let m = block.min(h).min(w);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

impl<T: Scalar> Module<T> for Bottleneck<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let mut r = self.interior.module().forward(x, ctx)?;
        r = self.conv3.forward(&r, ctx)?;
        r = self.bn3.forward(&r, ctx)?;
        if let Some(db) = &mut self.dropblock {
            let (_, _, h, w) = r.dims4("dropblock")?;
            let configured = self.spec.dropblock.map_or(db.block_size, |d| d.block_size);
            db.block_size = fit_block(configured, h, w);
            r = db.forward(&r, ctx)?;
        }
        let s = match &mut self.shortcut {
            Some(sc) => sc.forward(x, ctx)?,
            None => x.clone(),
        };
        if r.shape() != s.shape() {
            return Err(Error::shape(
                "bottleneck",
                format!(
                    "{}: residual {:?} vs shortcut {:?}",
                    self.spec.path,
                    r.shape(),
                    s.shape()
                ),
            ));
        }
        self.out_relu.forward(&r.add(&s)?, ctx)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.out_relu.backward(grad_out)?;
        let mut gr = g.clone();
        if let Some(db) = &mut self.dropblock {
            gr = db.backward(&gr)?;
        }
        gr = self.bn3.backward(&gr)?;
        gr = self.conv3.backward(&gr)?;
        let mut dx = self.interior.module().backward(&gr)?;
        let ds = match &mut self.shortcut {
            Some(sc) => sc.backward(&g)?,
            None => g,
        };
        dx.add_assign(&ds)?;
        Ok(dx)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.interior.module_ref().visit_params(f);
        self.conv3.visit_params(f);
        self.bn3.visit_params(f);
        if let Some(s) = &self.shortcut {
            s.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.interior.module().visit_params_mut(f);
        self.conv3.visit_params_mut(f);
        self.bn3.visit_params_mut(f);
        if let Some(s) = &mut self.shortcut {
            s.visit_params_mut(f);
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.interior.module_ref().visit_buffers(f);
        self.bn3.visit_buffers(f);
        if let Some(s) = &self.shortcut {
            s.visit_buffers(f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.interior.module().visit_buffers_mut(f);
        self.bn3.visit_buffers_mut(f);
        if let Some(s) = &mut self.shortcut {
            s.visit_buffers_mut(f);
        }
    }
}

/// Stem, four stages of bottlenecks, global pooling, optional dropout and a
/// dense classifier.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar = f64> {
    pub cfg: NetworkConfig,
    pub plan: NetworkPlan,
    pub stem: Sequential<T>,
    pub blocks: Vec<Bottleneck<T>>,
    pool: GlobalAvgPool,
    dropout: Option<Dropout<T>>,
    pub fc: Dense<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new(cfg: &NetworkConfig, rng: &mut RngState) -> Result<Self> {
        let plan = cfg.plan()?;
        let stem = build_stem(&plan.stem, rng);
        let blocks = plan
            .blocks
            .iter()
            .map(|b| Bottleneck::new(b, rng))
            .collect::<Result<Vec<_>>>()?;
        let fc = Dense::new("fc", plan.features, plan.num_classes, 1, true, rng);
        Ok(Network {
            cfg: cfg.clone(),
            stem,
            blocks,
            pool: GlobalAvgPool::default(),
            dropout: (plan.dropout_p > 0.0).then(|| Dropout::new(plan.dropout_p)),
            fc,
            plan,
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4("network")?;
        if c != self.cfg.input_channels {
            return Err(Error::shape(
                "network",
                format!("expected {} input channels, got {c}", self.cfg.input_channels),
            ));
        }
        if h < MIN_INPUT || w < MIN_INPUT {
            return Err(Error::Config(format!(
                "input {h}x{w} is smaller than the minimum {MIN_INPUT}x{MIN_INPUT}"
            )));
        }
        Ok(())
    }

    fn head(&mut self, features: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let mut f = self.pool.forward(features, ctx)?;
        if let Some(d) = &mut self.dropout {
            f = d.forward(&f, ctx)?;
        }
        self.fc.forward(&f, ctx)
    }

    /// Forward with every residual branch removed (stem, shortcuts, head).
    pub fn forward_shortcut_only(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = self.stem.forward(x, ctx)?;
        for b in &mut self.blocks {
            h = b.forward_shortcut_only(&h, ctx)?;
        }
        self.head(&h, ctx)
    }
}

impl<T: Scalar> Module<T> for Network<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = self.stem.forward(x, ctx)?;
        for b in &mut self.blocks {
            h = b.forward(&h, ctx)?;
        }
        self.head(&h, ctx)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.fc.backward(grad_out)?;
        if let Some(d) = &mut self.dropout {
            g = d.backward(&g)?;
        }
        g = self.pool.backward(&g)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        self.stem.backward(&g)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.stem.visit_params(f);
        for b in &self.blocks {
            b.visit_params(f);
        }
        self.fc.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.stem.visit_params_mut(f);
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
        self.fc.visit_params_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.stem.visit_buffers(f);
        for b in &self.blocks {
            b.visit_buffers(f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.stem.visit_buffers_mut(f);
        for b in &mut self.blocks {
            b.visit_buffers_mut(f);
        }
    }
}
