//! Inverse tonemapping of outdoor lat-long panoramas.

pub mod autodiff;
pub mod datagen;
pub mod eval;
pub mod itmo;
pub mod kv;
pub mod net;
pub mod pano;
pub mod real;
pub mod sun;
pub mod training;
pub mod transport;

pub use real::Real;

/// Single-precision working types.
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape32 = autodiff::Tape<f32>;
pub type ModelParams32 = net::ModelParams<f32>;
pub type TransportMatrix32 = transport::TransportMatrix<f32>;
pub type HdrPanorama32 = pano::HdrPanorama<f32>;
pub type Dataset32 = training::Dataset<f32>;

/// Double-precision types for verification.
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tape64 = autodiff::Tape<f64>;
