//! Glare-aware Retinex decomposition for multi-exposure image fusion.
//!
//! An image is modelled as `I = L · (R̂ + G)`: a single-channel illumination
//! `L`, an exposure-invariant shared reflectance `R̂` and a non-negative glare
//! term `G`. Three small networks estimate these from exposure sequences
//! without supervision; fusion recombines a remapped illumination with `R̂`.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient and determinism checks). Aliases for both are re-exported
//! here.

pub mod curve;
pub mod data_io;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{AdamState, Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;

pub type ModelParams32 = networks::ModelParams<f32>;
pub type ModelParams64 = networks::ModelParams<f64>;
pub type Decomposition32 = pipeline::Decomposition<f32>;
pub type Decomposition64 = pipeline::Decomposition<f64>;
