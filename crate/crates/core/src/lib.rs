//! Weakly supervised 3D vessel segmentation from 2D maximum intensity
//! projection annotations.
//!
//! A 2D mask painted on a MIP is lifted into 3D seeds through the MIP's
//! argmax index map, grown into a foreground set, paired with an
//! intensity-derived background set, and the resulting sparse labels are
//! cleaned and extended using a network's probabilities and Monte Carlo
//! uncertainty. Fusion primitives (index-based feature retrieval and the
//! combined loss) and vessel metrics are provided for external trainers.

pub mod edt;
pub mod error;
pub mod fusion;
pub mod metaimage;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod projection;
pub mod pseudolabel;
pub mod refine;
pub mod volume;

pub use error::{Error, Result};
pub use projection::{Axis, Mask2D, Mip2D};
pub use volume::{BinaryVolume, Dims, Grid3, Label, LabelVolume, ProbabilityVolume, ScalarVolume, Spacing};
