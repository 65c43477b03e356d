//! Modality-aware negative-aware fine-tuning of a toy dual-stream
//! flow-matching model.
//!
//! The pieces, bottom-up: [`model`] is the velocity network, [`sampling`]
//! integrates it into samples, [`rewards`] scores them, [`objective`] turns
//! scores into a loss, [`modes`] selects which parts of the method are on,
//! and [`trainer`] drives the loop.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod modes;
pub mod objective;
pub mod optim;
pub mod rewards;
pub mod sampling;
pub mod seed;
pub mod trainer;

pub use config::{RewardConfig, RunConfig, TrainConfig};
pub use error::{CoreError, Result};
pub use model::{DualStreamPolicy, ModelConfig, Stream};
pub use modes::{ModeRegistry, TrainingMode};
