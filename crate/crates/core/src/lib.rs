//! Decoupled spatial-temporal traffic forecasting.
//!
//! The library separates road-network traffic into a *diffusion* signal
//! (what flows in from neighboring sensors) and an *inherent* signal (what a
//! sensor would do on its own), models the two with different machinery —
//! graph diffusion convolutions and a GRU + self-attention stack — and sums
//! their multi-horizon forecasts. Everything runs on a small hand-rolled
//! reverse-mode autodiff tape over `f64` matrices, which keeps training
//! deterministic for a given seed.
//!
//! Crate layout:
//! - [`data`] — dataset loading, conversion, windowing, splits, scaling
//! - [`graph`] — distance/connectivity adjacency and transition matrices
//! - [`autodiff`] / [`params`] — tape, gradients, parameter store, Adam
//! - [`dynamic_graph`] — time-varying transition matrices
//! - [`diffusion`] — localized diffusion-convolution block
//! - [`inherent`] — GRU + multi-head self-attention block
//! - [`model`] — decoupled layers, forecast head, checkpoints
//! - [`training`] — masked-MAE loss, curriculum, the training loop
//! - [`evaluation`] — per-horizon metrics and the historical-average baseline
//! - [`ablation`] — named config variants for component studies
//! - [`synthetic`] — synthetic datasets for tests and examples

pub mod ablation;
pub mod autodiff;
pub mod data;
pub mod diffusion;
pub mod dynamic_graph;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod inherent;
pub mod model;
pub mod params;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
