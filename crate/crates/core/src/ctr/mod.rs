//! The host CTR model, its baselines and the training loop.

mod gradcheck;
mod model;
mod train;

pub use gradcheck::{check_model_gradients, gradcheck_config, jitter_biases, random_batch, GradCheckOptions};
pub use model::{ctr_loss, total_loss, BatchOutput, CtrModel, ModelConfig, Variant};
pub use train::{evaluate, train, EpochReport, RunConfig, TrainConfig, TrainOutcome};
