//! Atrous convolution, a cascaded residual backbone with output-stride
//! control, an ASPP segmentation head, and the training / evaluation
//! machinery around them.

pub mod aspp;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod norm;
pub mod pnm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Pad, Tensor};
