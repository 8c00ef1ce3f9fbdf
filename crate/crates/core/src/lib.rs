//! Single-shot object detection trained from scratch with densely connected backbones.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`kernels`], [`autograd`], [`optim`]: a small CPU tensor core with
//!   reverse-mode differentiation and momentum SGD; [`gradcheck`] verifies every operator
//!   against an independent 64-bit finite-difference oracle.
//! * [`arch`]: the `DS/A-B-k-θ` architecture family, its shape trace and parameter count, and
//!   an executable [`arch::Model`].
//! * [`multibox`]: default boxes, matching, offset coding, hard negative mining and the loss.
//! * [`data`]: a deterministic synthetic-shapes detection dataset with PPM/text I/O.
//! * [`train`], [`checkpoint`], [`eval`]: the training recipe, binary checkpoints, inference
//!   with NMS, and VOC-style mean average precision.

pub mod arch;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod kv;
pub mod multibox;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
