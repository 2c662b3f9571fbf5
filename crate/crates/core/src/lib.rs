//! Semantic segmentation with learned feature alignment.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`ops`], [`autograd`], [`optim`]: a small NCHW tensor
//!   library with reverse-mode differentiation and SGD.
//! - [`align`]: offset-guided bilinear sampling, the operator every aligning
//!   block is built on.
//! - [`nn`]: residual blocks, offset heads, aligned aggregation and aligned
//!   context modules, losses.
//! - [`network`]: the dual-pathway network.
//! - [`data`], [`train`], [`eval`], [`metrics`]: synthetic scenes, training,
//!   inference and scoring.
//! - [`config`], [`checkpoint`]: run configuration text and the binary
//!   checkpoint format.
//! - [`viz`]: color encoding of predicted offset fields.
//! - [`gradcheck`]: finite-difference verification of every backward rule.

pub mod align;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod labels;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod par;
pub mod params;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use labels::{LabelMap, IGNORE};
pub use tensor::{Real, Tensor4};
