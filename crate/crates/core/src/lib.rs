//! Math substrate for the workspace: dense tensors, a reverse-mode
//! differentiation tape, adaptive-moment optimization, EMA shadow weights,
//! seeded randomness, and a finite-difference gradient checker.
//!
//! Everything here is a pure function over explicit state. Nothing touches
//! global mutable state, so calls on disjoint data are thread-safe; bitwise
//! reproducibility is guaranteed for single-threaded use with a fixed seed.
//!
//! The tape supports gradients of gradients: every backward rule is itself
//! expressed in tape operations, which is what lets the gradient-norm
//! penalty used by the training engine differentiate through a gradient.

pub mod dtype;
pub mod ema;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod tensor_io;

pub use dtype::{DType, Element};
pub use ema::{ema_update, EmaState};
pub use kernels::ConvSpec;
pub use error::{CoreError, Result};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use graph::{backward, Tape, Var};
pub use optim::{adam_step, AdamConfig, OptimizerState, ParamSet};
pub use rng::{RngState, RngStream};
pub use tensor::Tensor;
