//! Training of small convolutional networks under emulated dynamic
//! fixed-point arithmetic.
//!
//! Weights, activations and gradients are stochastically rounded into
//! per-attribute `<IL,FL>` formats. A feedback controller widens or narrows
//! each format once per iteration from the observed overflow rate and average
//! relative quantization error.
//!
//! Modules:
//! - [`fixed_point`]: formats and quantizers
//! - [`quant_stats`]: window statistics feeding the controller
//! - [`controller`]: the precision scaling rule
//! - [`nn`]: CNN engine with quantization taps
//! - [`mnist`]: IDX parsing and batching
//! - [`harness`]: experiment loop, evaluation and metrics
//! - [`config`]: run configuration file format

pub mod config;
pub mod controller;
pub mod error;
pub mod fixed_point;
pub mod harness;
pub mod mnist;
pub mod nn;
pub mod quant_stats;
pub mod rng;
pub mod tensor;

pub use config::RunConfig;
pub use controller::{update_attribute, Attribute, ControllerConfig, PerAttribute, PrecisionState};
pub use error::{DivergenceSite, Error, Result};
pub use fixed_point::{
    quantize_nearest, quantize_stochastic, quantize_tensor, FixedPointFormat, QuantEvent, Quantizer,
    RoundingMode,
};
pub use harness::{run_experiment, MetricsRow, RunMode, RunOutcome, SaturationGrad};
pub use mnist::Dataset;
pub use nn::{LayerSpec, Network, SgdConfig};
pub use quant_stats::QuantStats;
pub use tensor::Tensor;
