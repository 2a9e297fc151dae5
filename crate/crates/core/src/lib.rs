//! Unified image/text masked modelling on single-channel rasters and reports.
// Index loops mirror the math; `!(x > 0.0)` is used on purpose to reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod tokenize;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Mode, QueryType, TrainConfig};
pub use data::{Raster, Scenario, ScenarioConfig, StudyRecord, TrainingTuple};
pub use error::{Error, Result};
pub use heads::{GalleryEntry, HashCode};
pub use metrics::MetricReport;
pub use model::Model;
pub use tensor::Mat;
pub use tokenize::Vocab;
pub use train::{EvalTask, FinetuneTask, Trainer};
