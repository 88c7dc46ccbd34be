//! Transfer-learning laboratory.
//!
//! Builds transfer-learning networks (TLNs) from a pretrained source
//! network: slicing it with or without its classification layer, stacking
//! normalized FC layers on top, and fine-tuning from a chosen unit onward
//! while earlier units stay frozen. Everything runs on a small reverse-mode
//! autodiff core.

pub mod autograd;
pub mod error;
pub mod io;
pub mod nn;
pub mod pretrain;
pub mod seed;
pub mod sweep;
pub mod synth;
pub mod tensor;
pub mod tln;
pub mod train;
pub mod tsne;

pub use error::{Error, Result};
pub use tensor::Tensor;
