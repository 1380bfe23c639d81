//! Honest causal forest estimation for multiple treatment states.
//!
//! The pipeline: load a sample ([`data`]), split it into a tree-building and
//! an honest half, optionally replace outcomes by cross-fitted residuals
//! ([`centering`]), precompute matched outcomes for the cross-arm criterion
//! ([`matching`]), grow an honest forest ([`forest`]) under one of several
//! split criteria ([`criterion`]), and turn forest leaves into observation
//! weights that feed every downstream estimate and its standard error
//! ([`inference`]). [`diagnostics`] covers common support and covariate
//! balance, [`emcs`] is a simulation harness that measures the whole stack
//! against known truths.

pub mod centering;
pub mod criterion;
pub mod data;
pub mod diagnostics;
pub mod emcs;
pub mod error;
pub mod forest;
pub mod inference;
pub mod matching;
pub mod rng;

pub use error::Error;

/// Crate result alias.
pub type Result<T> = std::result::Result<T, Error>;
