//! Area-based registration of a template raster to a reference raster with
//! accuracy estimation at both the local (per-correspondence) and global
//! (fitted-transform) scales.
//!
//! The registration pipeline:
//! 1. Coarse affine initialization from corner geolocation metadata, reduced
//!    to a rotation/isomorphic-scale approximation for fragment warping.
//! 2. The template is tiled into non-overlapping control fragments; putative
//!    correspondences (PCs) are found by normalized cross-correlation over a
//!    per-fragment search zone and refined to subpixel precision.
//! 3. Each PC receives a potential-accuracy estimate: a Cramér–Rao lower
//!    bound on translation error derived from a joint Gaussian model of the
//!    two fragments (fractional-Brownian-motion texture plus spatially
//!    correlated, signal-dependent noise). PCs with a poor bound are dropped.
//! 4. An EM mixture solver with leave-one-out cross-validated predictions
//!    jointly rejects outliers and fits a bivariate polynomial transform,
//!    producing the coefficient covariance and a pointwise registration-SD
//!    field that is fed back to shrink the search zones.
//!
//! The [`pipeline`] module orchestrates the full loop; [`synth`] provides the
//! seeded synthetic-scene generator used by the test and benchmark harness.

pub mod accuracy;
pub mod error;
pub mod geometry;
pub mod kdtree;
pub mod matcher;
pub mod noise;
pub mod pipeline;
pub mod raster;
pub mod solver;
pub mod synth;

pub use error::RaeError;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, RaeError>;
