//! Blocks, the hierarchical classifier, variant configurations and checkpoints.

pub mod block;
pub mod checkpoint;
pub mod config;
pub mod network;

pub use block::{block_forward, block_pair_forward, Block};
pub use checkpoint::{load_checkpoint, read_tensor_file, save_checkpoint, write_tensor_file, Checkpoint};
pub use config::{build_variant, BlockConfig, ModelConfig, NwcPosition, VARIANTS};
pub use network::{token_merge, token_merge_layer, Linear, Model, TokenEmbed};
