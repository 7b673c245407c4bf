//! ResNeSt bottlenecks, stages and whole networks.

mod config;
mod model;
mod plan;

pub(crate) use config::parse_value;
pub use config::{
    depth_of, parse_kv, parse_variant, stage_blocks_for_depth, DropBlockConfig, KvEntry, NetworkConfig, MIN_INPUT,
    NETWORK_KEYS,
};
pub use model::{build_shortcut, build_stem, BlockInterior, Bottleneck, Network};
pub use plan::{BottleneckSpec, Interior, NetworkPlan, ShortcutSpec, StemSpec};
