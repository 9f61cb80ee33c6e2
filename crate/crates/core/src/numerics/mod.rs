//! Dense matrices, MLPs and a small reverse-mode tape.

pub mod gradcheck;
mod matrix;
mod mlp;
pub mod ops;
mod params;
mod tape;

pub use gradcheck::{finite_diff_check, relative_error, BlockReport, GradCheckReport, ParamBlocks};
pub use matrix::{axpy, dot, Matrix};
pub use mlp::{mlp_forward, Activation, Layer, Mlp};
pub use ops::{binary_cross_entropy, sigmoid, smooth_l1, smooth_l1_grad, softmax, softmax_backward};
pub use params::{fnv1a, param_rng, uniform, ParamSet};
pub use tape::{Gradients, NodeId, ParamId, TableKey, Tape};
