//! Cost accounting and information-flow analysis.

pub mod cost;
pub mod reach;

pub use cost::{count_flops, count_params, CostReport, CostRow, CONVENTION};
pub use reach::{
    reachability_probe, symbolic_for_stack, symbolic_reachability, BlockKind, ProbeConfig, ReachabilitySet, Relation,
    StackSpec,
};
