//! Fully-convolutional anomaly detection for surveillance video.
//!
//! Frames are stacked into a three-channel temporal input, passed through a
//! frozen shallow CNN, and every cell of the tap layer's grid is scored by a
//! two-stage Gaussian cascade. Cells that stage one cannot decide are
//! re-described by a sparse-autoencoder layer and scored again. Abnormal cells
//! vote for the pixels of their receptive fields to form detection masks.

pub mod autoencoder;
pub mod cascade;
pub mod error;
pub mod eval;
pub mod localization;
pub mod net;
pub mod pipeline;
pub mod preproc;
pub mod rfgeom;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use tensor::Tensor3;
