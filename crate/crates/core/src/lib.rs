pub mod attacks;
pub mod autodiff;
pub mod causal_align;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod models;
pub mod objectives;
pub mod real;
pub mod tensor;

pub use autodiff::{Graph, NodeId};
pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
