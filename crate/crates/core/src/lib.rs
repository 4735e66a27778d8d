//! Training system for segmenting glandular tissue without basal cells (WOB)
//! on multi-resolution slide images.
//!
//! The crate is organized around a small set of subsystems:
//!
//! * [`raster`] / [`slide`]: dense planes and the `.slab` slide directory
//!   format (image pyramid, masks, channel roles).
//! * [`synth`]: deterministic synthetic slide generator with exact ground
//!   truth, used for every benchmark in the test suite.
//! * [`annotate`]: density-filter pipeline that turns immunofluorescence
//!   channels into a generated WOB mask.
//! * [`augment`]: patch augmentation pipeline (rotation, mirroring, elastic
//!   deformation, color jitter) with a text config format.
//! * [`model`]: small fully convolutional network with exact analytic
//!   gradients, tiled slide inference, and a compound two-resolution mode.
//! * [`hem`]: the two-worker hard-example-mining training protocol with a
//!   simulated-clock mode for reproducible tests.
//! * [`metrics`]: histogram-based precision/recall evaluation and reports.

pub mod annotate;
pub mod augment;
pub mod error;
pub mod filter;
pub mod hem;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod slide;
pub mod synth;

pub use error::{Error, Result};

/// Sizes the global worker pool used for tiled prediction. Call once,
/// before any prediction; later calls fail harmlessly.
pub fn configure_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::InvalidConfig("threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}
