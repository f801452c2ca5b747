//! File formats, experiment configuration, stage orchestration and reports
//! around `vsrdistill-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod pipeline;
pub mod plot;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{LabError, LabResult};
