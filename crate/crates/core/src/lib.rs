//! Diffusion models with a bidirectional selective state-space backbone,
//! built from scratch: a small reverse-mode tensor engine, the sequence
//! model itself, DDPM training and sampling, and an instrumented profiler
//! that verifies the linear-vs-quadratic cost behaviour of the two kernel
//! families.

pub mod bench;
pub mod diffusion;
pub mod gradcheck;
pub mod model;
pub mod ssm;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use tensor::{Buffer, DType, Graph, NodeId, ParamId, ParamStore, Tensor, TensorError};
