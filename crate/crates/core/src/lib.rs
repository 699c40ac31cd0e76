//! Volumetric super-resolution of micro-CT scans with a residual 3D
//! convolutional network.
//!
//! The pipeline: a high-resolution scan is box-downsampled and cubic
//! upsampled back to its grid ([`dataset::degrade`]), cut into aligned
//! sub-blocks ([`dataset::build_training_set`]), and a stack of same-padded
//! 3D convolutions learns the residual between the two ([`optimizer::train`]).
//! At inference time [`reconstruct::super_resolve`] upsamples a
//! low-resolution volume and adds the predicted residual tile by tile.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod network;
pub mod optimizer;
pub mod reconstruct;
pub mod resample;
pub mod synthetic;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use network::{init_network, Network, NetworkConfig};
pub use tensor::{Dims, Real, Shape4, Tensor4};
pub use volume::{load_volume, save_volume, DType, Volume};
