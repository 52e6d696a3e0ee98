//! Desk-scale laboratory for deep Transformer encoders.
//!
//! The crate implements post-norm and pre-norm residual stacks, dynamic
//! linear combination of layers (DLCL) with learnable or preset aggregation
//! weights, a self-contained f64 reverse-mode autodiff tape, gradient-flow
//! diagnostics that verify the backward-pass factorizations of both norm
//! placements, and a small training harness (Adam with warmup/inverse-sqrt
//! schedule, gradient accumulation, checkpoint averaging, beam search) for
//! synthetic sequence tasks.
//!
//! See the `examples/` directory for runnable entry points per capability and
//! the `dlcl` binary for the scriptable command-line surface.

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamStore, Parameter, Tensor};
