//! Dataset ingestion (synthetic and file-based), deterministic batching,
//! run configuration, and metrics persistence.

pub mod config;
pub mod dataset;
pub mod formats;
pub mod metrics;

pub use config::RunConfig;
pub use dataset::{make_blobs, minibatches, Batch, DatasetHandle};
pub use formats::{load_cifar_binary, load_idx};
pub use metrics::{read_metrics, write_metrics, EpochMetrics};
