//! Multi-timescale self-supervised behavior representations.
//!
//! Two causal dilated temporal-convolution encoders produce short- and
//! long-term embeddings per frame. They are trained to predict histograms of
//! future actions (squared-CDF earth mover loss) and, per timescale, to
//! predict stop-gradient embeddings of positive views. The crate also holds
//! a synthetic data generator, feature extraction and a linear-probe
//! evaluation harness.
//!
//! Numerical building blocks are generic over [`Scalar`] (`f32` or `f64`);
//! the aliases below fix the model pipeline to `f64`.

pub mod bootstrap;
pub mod config;
pub mod dataset;
pub mod diffcore;
pub mod eval;
pub mod features;
pub mod hoa;
pub mod model;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use scalar::Scalar;

pub type Tensor = diffcore::Tensor<f64>;
pub type Graph = diffcore::Graph<f64>;
pub type ParamStore = diffcore::ParamStore<f64>;
pub type Adam = diffcore::Adam<f64>;
