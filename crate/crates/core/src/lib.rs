pub mod compressor;
pub mod diagnostics;
pub mod distiller;
pub mod error;
pub mod greenmeter;
pub mod model;
pub mod nas;
pub mod numcore;
pub mod pipeline;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};

pub type Tensor32 = numcore::Tensor<f32>;
pub type Tensor64 = numcore::Tensor<f64>;
pub type Graph32 = numcore::Graph<f32>;
pub type Graph64 = numcore::Graph<f64>;
pub type Model32 = model::ModelState<f32>;
pub type Model64 = model::ModelState<f64>;
