//! Numeric kernels with explicit forward and backward functions. The
//! [`autograd`](crate::autograd) tape wires them together.

pub mod conv;
pub mod loss;
pub mod norm;
pub mod sample;

pub use conv::ConvGeom;
pub use sample::{avg_pool_to_bins, bilinear_resize};
