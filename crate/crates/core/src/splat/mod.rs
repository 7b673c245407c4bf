//! The Split-Attention unit in radix-major and cardinality-major layouts.

mod config;
mod layout;
mod ops;
pub mod reference;
mod unit;

pub use config::{default_attention_inner, SplatConfig};
pub use layout::{forward_cardinality_major, group_permutation, permute_params, Direction};
pub use ops::{
    cardinal_fuse, cardinal_fuse_backward, channel_stats, r_softmax, r_softmax_backward, weighted_fuse,
    weighted_fuse_backward, SplitLogits, SplitWeights,
};
pub use unit::{downsample_pool, forward_radix_major, BnParams, Fault, HeadParams, SplatParams, SplatUnit};
