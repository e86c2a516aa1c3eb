//! Synthetic dataset, task splits, metrics and checkpoints.

pub mod checkpoint;
pub mod dataset;
pub mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dataset::{
    component_rng, derive_seed, generate_dataset, label_name, DatasetParams, Split, Style, SyntheticDataset,
    IMAGE_SIZE,
    TaskSplit,
};
pub use metrics::{average_precision, coco_style_metrics, MetricsReport};
