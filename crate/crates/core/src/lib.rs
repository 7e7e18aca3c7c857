//! A small laboratory for point-level normalization in time series forecasting.
//!
//! The crate wires four pieces together: dataset loading and windowing,
//! a synthetic regime-switching generator, normalizer/backbone pipelines with
//! exact hand-written gradients, and an evaluation layer (metrics, improvement
//! aggregation, ADF stationarity diagnostic). The `runner` module drives a
//! full experiment from a TOML config and writes reports the CLI exposes.

pub mod backbones;
pub mod config;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod eval;
pub mod normalizers;
pub mod runner;
pub mod synth;

pub use error::{Error, Result};

/// Matrix with time on the rows and features on the columns.
pub type Mat = ndarray::Array2<f64>;
