//! Layers with explicit backward passes, composed into fixed per-block tapes.

mod layers;
mod module;
mod param;

pub use layers::{
    kaiming_normal, AvgPool2d, BatchNorm, Conv2d, Dense, DropBlock, Dropout, GlobalAvgPool, Layer, MaxPool2d, Relu,
    Sequential, BN_EPS, BN_MOMENTUM,
};
pub(crate) use module::missing_cache;
pub use module::{Ctx, Module};
pub use param::{join, Parameter};
