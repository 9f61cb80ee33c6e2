//! Large memory network: a product-key memory layer that compresses user
//! behavior sequences for click-through-rate models, plus the training
//! harness, synthetic data, metrics and a sharded memory-value server.

pub mod error;
pub mod numerics;

pub use error::{LmnError, Result};
pub mod bench;
pub mod config;
pub mod ctr;
pub mod data;
pub mod memory;
pub mod mps;
pub mod optim;
