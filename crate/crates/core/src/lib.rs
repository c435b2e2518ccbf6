//! Differentiable non-local spatial propagation for depth completion.
//!
//! The crate is organised bottom-up:
//!
//! - [`grid`]: field containers and validity checks
//! - [`sampler`]: bilinear sampling with derivatives
//! - [`norm`]: affinity normalization schemes and Monte Carlo analysis
//! - [`propagation`]: neighbor patterns and the propagation operator
//! - [`backprop`]: reverse-mode gradients of the reconstruction loss and a
//!   finite-difference checker
//! - [`scenes`]: synthetic scenes and sparse sampling protocols
//! - [`metrics`]: depth-completion error metrics
//! - [`learner`]: per-pixel parameter fitting and ablation grids
//! - [`io`]: file formats and run configuration

pub mod backprop;
pub mod error;
pub mod grid;
pub mod io;
pub mod learner;
pub mod metrics;
pub mod norm;
pub mod propagation;
pub mod sampler;
pub mod scenes;

pub use error::{Error, FormatError, Result};
pub use grid::{
    AffinityField, ConfidenceMap, Field2D, Mask, NeighborField, NormalizedAffinity, SparseDepth, Validate,
};
pub use norm::NormScheme;
pub use propagation::{NeighborMode, PropagationConfig, PropagationInputs};
