//! Datasets: the CSV sample format, a synthetic generator and evaluation metrics.

pub mod metrics;
pub mod sample;
pub mod synthetic;

pub use metrics::{auc, auc_improvement, logloss, logloss_improvement, round_half_even, MetricsReport};
pub use sample::{load_csv, read_csv, save_csv, write_csv, Sample, Vocab, PADDING_ID};
pub use synthetic::{generate, read_meta, write_dataset, SyntheticData, SyntheticSpec, SyntheticWorld};
