//! Semi-supervised pseudo-labeling engine for dense labeling tasks.
//!
//! Teacher probabilities are split into reliable and unreliable pixels by an
//! entropy quantile. Reliable pixels receive pseudo-labels; unreliable pixels
//! are kept as rank-filtered negatives for a pixel-level contrastive loss,
//! stored in per-class FIFO memory banks.
//!
//! Module map:
//! - [`tensor`]: dense tensors, validated probability/label/representation maps, U2TN files
//! - [`partition`]: entropy, quantile threshold, pseudo-labels, schedules for the partition
//! - [`sampling`]: category order, anchors, positive centers, negative indicators
//! - [`memorybank`]: category-wise FIFO queues of negatives
//! - [`losses`]: cross-entropy, InfoNCE and the binary alternative, with closed-form gradients
//! - [`trainer`]: toy model, synthetic data, EMA teacher, training loop, mIoU
//! - [`config`]: typed run configuration

pub mod config;
pub mod error;
pub mod losses;
pub mod memorybank;
pub mod partition;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use tensor::{LabelMap, ProbBatch, ReprBatch, Tensor, IGNORE};
