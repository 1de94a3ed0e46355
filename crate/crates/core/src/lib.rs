//! Fine-scale parcellation of brain nuclei from streamline-cluster connectivity.
//!
//! The crate is organized along the processing chain:
//!
//! * [`volio`]: NIfTI-1 volumes, masks and labelmaps, plus mask morphology.
//! * [`tract`]: TCK streamlines, mask filtering and groupwise k-medoids clustering.
//! * [`features`]: per-voxel cluster intersections, cluster dilation and
//!   Gaussian smoothing, cyclic 2D augmentation.
//! * [`deepclust`]: the convolutional autoencoder trained jointly with k-means.
//! * [`parcel`]: labelmap assembly and evaluation metrics.
//! * [`phantom`]: synthetic nuclei and bundles with known ground truth.

pub mod deepclust;
pub mod error;
pub mod features;
pub mod parcel;
pub mod phantom;
pub mod tract;
pub mod volio;

pub(crate) mod util;

pub use error::{Error, Result};
