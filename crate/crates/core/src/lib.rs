//! Hybrid sparse/linear attention stack.

pub mod bench;
pub mod convert;
pub mod error;
pub mod kernels;
pub mod linattn;
pub mod memlat;
pub mod real;
pub mod sparseattn;
pub mod stack;
pub mod tensor;

pub use error::{Error, Result};
pub use real::{Dtype, Real};
pub use tensor::{HeadTensor, Matrix};
