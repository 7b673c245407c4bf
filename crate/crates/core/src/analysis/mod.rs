//! Parameter and MAC accounting, reference-table comparison and timing.

mod bench;
mod cost;
mod known;

pub use bench::{bench_forward, bench_layouts, tensor_hash, BenchStats, LayoutTiming};
pub use cost::{
    block_cost, block_cost_parity, conv_macs, count_flops, count_params, parity_block, CostReport, CostRow, LayerKind,
    ParityReport,
};
pub use known::{compare, known_variants, match_known, Comparison, KnownVariant};
