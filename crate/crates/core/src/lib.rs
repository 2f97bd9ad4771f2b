//! Spatial-temporal traffic forecasting with fusion-matrix graph learning.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`tape`], [`params`], [`gradcheck`]: dense tensors and a
//!   small reverse-mode differentiation engine.
//! * [`data`]: series/adjacency loading, synthetic traffic, windowing and splits.
//! * [`embedding`], [`attconv`], [`fusion`], [`encoder`], [`model`]: the
//!   forecasting network.
//! * [`metrics`], [`train`], [`baselines`]: evaluation and optimisation.
//! * [`verify`]: fixtures for gradient checks and node-permutation tests.

pub mod attconv;
pub mod baselines;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Binary, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;

pub use data::{DatasetSplit, Normalizer, SampleWindow, Series, TimeIndex, TrafficGraph};
pub use metrics::MetricReport;
pub use model::{Ablation, FmpestfModel, ModelConfig};
pub use train::{EpochLog, TrainConfig};
