//! Grid-based driver attention prediction.
//!
//! Saliency maps are encoded into coarse `N x M` grid vectors, a small head
//! (1x1 convolution, average pooling, dense + sigmoid) predicts those vectors
//! from detector feature maps, and decoded predictions decide which detected
//! objects the driver is attending to.

pub mod attention;
pub mod cli;
pub mod error;
pub mod head;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod saliency;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use par::Exec;
