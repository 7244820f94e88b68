//! Multi-modal attention Transformer for vehicle trajectory prediction.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: reverse-mode autodiff engine, layers, Nadam, clipping.
//! - [`scene`]: agents, lanes, scenes, target-centric normalization and
//!   neighbor/lane selection.
//! - [`data`]: scene files, the synthetic scenario generator, batching.
//! - [`encoders`], [`attention`], [`heads`]: the network.
//! - [`model`]: the assembled predictor; [`train`]: the training loop.
//! - [`metrics`]: minADE, minFDE, brier-minFDE, miss rate.
//! - [`checkpoint`], [`config`]: persistence and configuration.
// `!(x >= 0.0)` is how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
mod error;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod scene;
pub mod tensor;
pub mod train;

pub use config::{MapMode, ModelConfig, MultimodalMode, RunConfig};
pub use error::{Error, Result};
pub use metrics::MetricReport;
pub use model::Predictor;
pub use scene::{PredictionSet, Scene};
pub use tensor::{Mask, Tensor};
