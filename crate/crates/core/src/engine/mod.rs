// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal reverse-mode differentiation engine with second-order support.

mod error;
pub mod fd;
mod tape;
mod tensor;

pub use error::EngineError;
pub use fd::{central_difference, finite_diff_check, max_relative_error};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
