//! The synthetic shifted-view segmentation harness: dataset generation,
//! model assembly, training, metrics, and inspection.

pub mod dataset;
pub mod inspect;
pub mod metrics;
pub mod model;
pub mod train;

pub use dataset::{generate_dataset, load_dataset, save_dataset, Dataset, SegSample};
pub use inspect::dump_feature_maps;
pub use metrics::{Confusion, Metrics};
pub use model::{build_model, Model, ModelBlock, ParamReport};
pub use train::{evaluate, history_csv, train, EpochRecord, TrainOptions, HISTORY_HEADER};
