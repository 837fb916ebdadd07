//! Stochastic local winner-takes-all networks with stick-breaking IBP gates.

pub mod attacks;
pub mod checkpoint;
pub mod datasets;
pub mod distributions;
pub mod ecoc;
pub mod error;
pub mod inspect;
pub mod layers;
pub mod model;
pub mod rng;
pub mod special;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
