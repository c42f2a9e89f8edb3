//! Class-balanced distillation for long-tailed classification.
//!
//! A small reverse-mode autodiff engine drives MLP feature extractors with
//! cosine classifiers. On top of it sit instance and class-balanced sampling,
//! feature, classifier and ensemble distillation, the two-stage recipes
//! (classifier re-training, fine-tuning, distillation from one or several
//! teachers) and split-wise evaluation with a nearest-class-mean probe.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod train;

pub use data::{Dataset, LongTailProfile, ShotSplit, ShotTag};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use experiment::RunConfig;
pub use losses::{DistillConfig, DistillMode};
pub use model::{Model, ModelSpec};
pub use tensor::Tensor;
pub use train::{Method, TrainConfig};
