//! Real-time hairstyle transfer: a style encoder and a mask-gated AdaIN
//! generator at 128x128, a two-scale patch discriminator, the training
//! objective and loop, a pluggable 4x super-resolution stage, and metrics.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod superres;
pub mod training;

pub use candle_core as candle;
pub use error::{Error, Result};
