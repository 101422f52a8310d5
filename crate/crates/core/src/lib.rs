//! Layer-wise partial information decomposition of multimodal activations.

pub mod analysis;
pub mod error;
pub mod gaussianize;
pub mod pid;
pub mod pipeline;
pub mod preprocess;
pub mod store;
pub mod synth;
pub mod trajectory;

pub use error::{Error, Result};
