//! Enhancement label encoding for class-imbalanced classification.
//!
//! Training labels are re-encoded every epoch as `L·G`, where the generator
//! `G` accumulates the validation soft-confusion costs of the current
//! network. A small dense network with softmax output is included so the
//! whole training loop runs without external frameworks.

pub mod config;
pub mod data;
pub mod encoding;
mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod trainer;

pub use config::{parse_config, Config};
pub use data::{Dataset, ImbalanceMode, SplitSpec};
pub use encoding::{ClassCounts, EncodingMode, GeneratorState};
pub use error::{Error, Result};
pub use losses::LossKind;
pub use metrics::MetricsBundle;
pub use network::NetworkParams;
pub use tensor::Matrix;
pub use trainer::{evaluate, train, TrainConfig, TrainHistory};
