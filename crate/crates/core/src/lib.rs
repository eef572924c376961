//! Self-supervised audio representation learning for bioacoustics.
//!
//! The pipeline discovers discrete acoustic units with k-means (first on
//! MFCC features, then on an intermediate encoder layer), pretrains a
//! CNN + transformer encoder to predict those units at masked frames, and
//! fine-tunes the encoder for clip classification or sliding-window
//! detection.

pub mod audio;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod synth;
pub mod train;
pub mod units;

pub use error::{Error, Result};
