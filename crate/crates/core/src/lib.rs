//! Bi-temporal change detection with a Siamese Swin-style encoder, contrast
//! feature enhancement, an attention-gated pyramid decoder and deeply
//! supervised boundary-aware losses, on top of a small reverse-mode tensor
//! engine.

mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod swin;
pub mod tensor;

pub use error::{Error, Result};
