//! Contrastive normal-embedding anomaly detection.
//!
//! An MLP encoder maps clip features to an embedding `h`; a projection head
//! maps `h` to a unit vector `v`. Training pulls normal projections together
//! and pushes them away from anomalous ones. At test time a clip is scored by
//! cosine similarity between its projection and the mean normal projection.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod loss;
pub mod optim;
pub mod pipeline;
pub mod stream;

pub use checkpoint::Checkpoint;
pub use config::{Config, EvalConfig, ModelConfig, TrainConfig};
pub use data::{ClipSample, DatasetSplit, Label, Modality, StreamKey, View};
pub use encoder::{EncoderDims, EncoderParams};
pub use error::{Error, ErrorKind, Result};
pub use linalg::{Embedding, Matrix};
pub use loss::{MiniBatch, Objective};
