//! Multi-task model merging with post-merge representation surgery.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`tape`], [`loss`], [`adam`]: dense tensors, reverse-mode
//!   differentiation and the optimizer used by every training loop.
//! * [`params`], [`checkpoint`]: named parameter maps and their on-disk format.
//! * [`data`], [`model`]: the synthetic task suite and the shared-encoder model family.
//! * [`merge`]: weight averaging, task arithmetic, TIES merging and AdaMerging.
//! * [`surgery`]: per-task low-rank adapters that pull merged representations
//!   back towards the individual models.
//! * [`diagnostics`]: representation-bias measurement and 2D projections.
//! * [`pipeline`]: configuration and end-to-end experiment drivers.

pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod loss;
pub mod merge;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod surgery;
pub mod tape;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};
pub use params::ParameterMap;
pub use tensor::Tensor;
