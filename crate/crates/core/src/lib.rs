//! CTNet-style semantic segmentation head on a small reverse-mode autodiff core.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, the autodiff tape, and finite-difference checks.
//! - [`blocks`]: channel excitation, channel/spatial context modules, the
//!   fusion head, a small backbone, ablation variants, and a pixel-to-pixel
//!   non-local baseline.
//! - [`objectives`]: segmentation, auxiliary and class-probability losses, and
//!   mIoU / pixel accuracy.
//! - [`data`]: synthetic scene generator, PPM/PGM codecs, augmentation.
//! - [`train`]: SGD with momentum, poly schedule, training and evaluation.
//! - [`bench`]: closed-form and instrumented cost counters.
//! - [`suite`]: the gradient-check suite over ops, blocks and full networks.

pub mod bench;
pub mod blocks;
pub mod data;
pub mod error;
pub mod objectives;
pub mod suite;
pub mod tensor;
pub mod train;

pub use error::{Error, Result, TensorError};
