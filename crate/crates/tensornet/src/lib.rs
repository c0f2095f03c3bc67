//! A small reverse-mode autodiff core.
//!
//! Exactly the vocabulary a recurrent neural-ODE model needs: dense layers,
//! SoftPlus / SELU / ReLU / sigmoid / tanh, column concat/slice/tile, a fused
//! GRU cell, masked mean-squared error and the ADAM optimizer. Everything is
//! 64-bit and single-graph-per-forward-pass.

mod adam;
mod error;
mod graph;
mod layers;
mod params;
mod tensor;

pub use adam::Adam;
pub use error::{Error, Result};
pub use graph::{selu, softplus, Gradients, Graph, GruVars, Var, SELU_ALPHA, SELU_LAMBDA};
pub use layers::{bidirectional, uniform_init, Gru, Linear};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;
