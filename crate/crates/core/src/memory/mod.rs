//! The product-key memory: decomposed keys, user-aware queries, two-axis
//! scoring, top-k read, memory loss and the full-key reference path.

mod block;
pub mod checkpoint;
mod config;
pub mod ops;

pub use block::{
    init_values, randomize_keys, HeadParams, MemoryBlock, MultiHeadRead, SequenceRead, TapeRead, VALUES_TABLE,
};
pub use checkpoint::{Checkpoint, CheckpointKind};
pub use config::MemoryConfig;
pub use ops::{
    combine_scores, flat_index, materialize_full_keys, memory_loss, naive_read, naive_scores, product_top_k,
    read_memory, score_axes, score_axes_counted, split_index, top_k, ActivationResult, MemoryKeys, MemoryLoss,
    MemoryValues, MulAddCounter, NAIVE_MAX_SLOTS,
};
