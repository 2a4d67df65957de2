//! Consistency-regularized multi-source unsupervised domain adaptation at desk scale.
//!
//! - [`autodiff`]: define-by-run reverse-mode differentiation over [`Matrix`].
//! - [`nn`]: shared feature extractor plus one classifier pair per source domain.
//! - [`losses`]: source cross-entropy, intra/inter-domain consistency, and
//!   the confidence-weighted self-training loss.
//! - [`data`]: synthetic shifted domains, the dataset file format, batching.
//! - [`trainer`]: the four-phase alternating training loop.

pub mod autodiff;
mod codec;
pub mod data;
pub mod error;
pub mod losses;
pub mod matrix;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use codec::Reader;
pub use data::{generate_task, DomainBatch, Generator, ShiftSpec, Task, TaskSpec};
pub use error::{Error, Result};
pub use losses::PseudoLabelWeighting;
pub use matrix::Matrix;
pub use nn::{Architecture, Branch, CrmaModel, ParamGroup, Trainable};
pub use trainer::{
    train, Ablation, ConfidenceTracker, EpochMetrics, TrainConfig, TrainRun, Trainer,
};
