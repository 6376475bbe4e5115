pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod generation;
pub mod hier_encoder;
pub mod inlevel_coherence;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pndb;
pub mod recon_losses;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete 64-bit instantiations.
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph64 = numerics::Graph<f64>;
pub type ParameterStore64 = numerics::ParameterStore<f64>;
pub type Model64 = model::Model<f64>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
