// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be 1x1, got {shape:?}")]
    NonScalarRoot { shape: [usize; 2] },
    #[error("leaf {0:?} registered twice")]
    DuplicateLeaf(String),
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("{op} over zero rows")]
    EmptyReduction { op: &'static str },
    #[error("column range {start}..{end} out of bounds for {cols} columns")]
    BadSlice { start: usize, end: usize, cols: usize },
    #[error("class {target} out of range for logits of shape {shape:?}")]
    BadTarget { target: usize, shape: [usize; 2] },
    #[error("non-finite function value at finite-difference probe {index}")]
    NonFiniteProbe { index: usize },
}
