//! Experiment orchestration: configuration, metrics, evaluation and the
//! reproduction runs built from the three stages.

mod experiments;
mod metrics;
mod supervised;

pub use experiments::*;
pub use metrics::*;
pub use supervised::{train_supervised, LabelSource, SupervisedConfig};
