//! Weakly-supervised lesion co-segmentation from RECIST diameters.
//!
//! The pipeline turns RECIST crosses into initial masks with GrabCut,
//! clusters lesions by appearance, trains a Siamese attention
//! co-segmentation network on within-cluster pairs, refines its output with
//! a dense CRF and scores the result.

pub mod error;
pub mod grabcut;
pub mod grid;
pub mod cluster;
pub mod crf;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
pub use grid::{BinaryMask, ImageGrid, Trimap, TrimapLabel};
pub use rng::SeededRng;
