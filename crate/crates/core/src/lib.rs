//! Disentangled speaking-style representations: a shared META embedding
//! regularized by graded label overlap, per-task contrastive subspaces,
//! EMA class prototypes and caption embeddings aligned to them.
//!
//! Everything runs on a small in-crate reverse-mode autodiff engine
//! ([`diff`]) in 64-bit floats.

pub mod cli;
pub mod data;
pub mod diff;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod prototypes;
pub mod schema;
pub mod trainer;

pub use data::{Dataset, LabeledSample, SyntheticConfig};
pub use diff::{Graph, Tensor, Var};
pub use encoder::{BackboneKind, Encoder};
pub use error::{Error, Result};
pub use inference::{ManipulationReport, Prediction, StyleVector};
pub use losses::DenominatorMode;
pub use metrics::ConfusionMatrix;
pub use model::{Model, ModelDims};
pub use prototypes::PrototypeBank;
pub use schema::TaskSchema;
pub use trainer::{Checkpoint, TrainConfig, Trainer};
