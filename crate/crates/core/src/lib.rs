//! Shuffle Transformer building blocks on a small deterministic tensor engine.
//!
//! * [`tensor`], [`graph`], [`optim`]: dense tensors, reverse-mode autodiff
//!   and parameter updates.
//! * [`windowing`]: window partition/reverse and the spatial shuffle and
//!   alignment permutations, fused into single gathers.
//! * [`layers`]: window attention, the neighbor-window connection and the
//!   1x1-conv MLP.
//! * [`model`]: blocks, stages, the hierarchical classifier, variants and
//!   checkpoints.
//! * [`analysis`]: parameter/FLOP ledgers and receptive-field reachability.
//! * [`cli`]: the subcommands behind the `shuffle-former` binary.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod windowing;

pub use error::{Error, Result};
pub use graph::{Graph, Param, Var};
pub use rng::Rng;
pub use tensor::{DType, Element, Tensor};
