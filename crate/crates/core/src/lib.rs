//! Local attribute cache that refines class text embeddings with
//! fine-grained token features, trained end to end on embedding bundles.

pub mod cache;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod numkit;
pub mod objective;
pub mod refiner;
pub mod training;

pub use error::{BundleError, CheckpointError, Error, Result};
pub use numkit::Matrix;
