//! Jointly trained answering and rationale-selection models whose visual
//! attention over a shared object set is pulled into agreement.

pub mod align;
pub mod attention;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod rng;
mod scalar;
pub mod synth;
#[cfg(test)]
mod test_util;
pub mod transformer;
pub mod vanilla;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph64 = numerics::Graph<f64>;
pub type AttentionMap64 = attention::AttentionMap<f64>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type VanillaModel64 = vanilla::VanillaModel<f64>;
pub type TransformerModel64 = transformer::TransformerModel<f64>;
pub type AnyModel64 = model::AnyModel<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type AnyModel32 = model::AnyModel<f32>;
