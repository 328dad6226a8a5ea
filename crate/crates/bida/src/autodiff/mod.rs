//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Everything numeric in this crate is built from the primitives here: 64-bit
//! dense tensors, a per-step recording graph, and a central-difference
//! gradient oracle used by the test suites. The engine is deliberately small:
//! no broadcasting beyond trailing-axis alignment, no views, no fusion.

mod check;
mod graph;
mod ops;
mod tensor;

pub use check::{finite_difference_check, OracleError};
pub use graph::{backward, no_grad, recording_enabled};
pub use ops::{apply_primitive, Primitive};
pub use tensor::{NumericFailure, Tensor};
