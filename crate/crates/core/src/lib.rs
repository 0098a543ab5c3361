//! Group-based distinctive image captioning.
//!
//! Similar-image group construction, distinctive word extraction, the
//! group-based differential memory attention pipeline, the training losses
//! with hand-derived gradients, and the CIDEr-family distinctiveness metrics.

pub mod dataset;
pub mod distinct;
pub mod error;
pub mod gdma;
pub mod groups;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod tensor;
pub mod text;
pub mod vocab;

pub use error::{Error, Result};
