// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense tensors and the tape-based autograd used to train the toy model.

pub mod kernels;
mod tape;
mod tensor;

pub use kernels::Segment;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
