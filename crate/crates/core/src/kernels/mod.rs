//! Raw `f32` compute kernels behind the autograd operators.

pub mod conv;
pub mod gemm;
pub mod norm;
pub mod pool;

pub use conv::{conv_out_extent, ConvGeom};
pub use pool::{pool_out_extent, PoolGeom};
