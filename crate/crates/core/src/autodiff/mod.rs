//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation evaluates eagerly and records a node on a [`Tape`].
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order of the graph and [`Tape::backward`] is one reverse
//! sweep that visits each node once.
//!
//! ```
//! use gridssl::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let p = tape.param(Tensor::vector(vec![3.0, 4.0]));
//! let n = tape.l2norm(p).unwrap();
//! let grads = tape.backward(n).unwrap();
//! assert_eq!(tape.value(n).item(), 5.0);
//! assert_eq!(grads.get(p).unwrap().data(), &[0.6, 0.8]);
//! ```

mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, PairFilter, PairKernel, RowPairs, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("tensors of rank {rank} are not supported (max 3)")]
    Rank { rank: usize },
    #[error("division by zero at element {index}")]
    DivisionByZero { index: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
}
