//! Sparse mixture-of-experts engine with modality-aware expert groups.

pub mod arch;
pub mod checks;
pub mod checkpoint;
pub mod data;
pub mod disentangle;
pub mod error;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod moe;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
