//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D [`ndarray::Array2`]; vectors are `1 × n` rows and
//! scalars are `1 × 1`. Operations are recorded on a [`Tape`] as they are
//! evaluated and [`Tape::backward`] walks the record in reverse. Model-specific
//! fused kernels plug in through [`CustomOp`].

mod param;
mod tape;

pub use param::{ParamId, ParamStore};
pub use tape::{sigmoid, CustomOp, Gradients, Tape, Var};
