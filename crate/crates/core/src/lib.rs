//! Patient-specific respiratory motion subspaces and real-time subspace
//! regression from single radiographs.
//!
//! The pipeline: register a 4D series of densities under a nuclear-norm
//! penalty ([`registration`], [`lowrank`]), extract an affine motion subspace
//! ([`subspace`]), render labelled radiographs through subspace deformations
//! ([`drr`], [`preprocess`], [`dataset`]), and train a DenseNet-style
//! regressor that maps one radiograph back to subspace weights ([`regressor`]).
//! [`phantom`] supplies an analytic breathing phantom with known motion and
//! [`eval`] measures geometric accuracy.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod dataset;
pub mod drr;
pub mod error;
pub mod eval;
pub mod geom;
mod linalg;
pub mod lowrank;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod registration;
pub mod regressor;
pub mod subspace;
mod util;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{DensityVolume, DisplacementField, GridGeometry, ScalarField};
