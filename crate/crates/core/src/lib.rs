//! Multi-task depth / saliency / contour prediction with a multi-modal
//! filtered transformer, built on a small reverse-mode tensor engine.
//!
//! Layout:
//! - [`tensor`]: tensors, the autodiff tape and the gradient checker
//! - [`checks`]: named gradient checks over ops, blocks, losses and a reduced model
//! - [`data`]: PNM IO, morphology, contour ground truth, augmentation, synthetic scenes
//! - [`model`]: encoder, multi-modal decoder blocks and the filtered transformer
//! - [`losses`]: depth, saliency and contour supervision
//! - [`metrics`]: saliency and depth evaluation
//! - [`train`]: optimizer, checkpoints, training / evaluation / prediction drivers

pub mod checks;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Precision, Tensor, Var};
