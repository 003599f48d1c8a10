//! Matching of two correlated Gaussian Wigner matrices.
//!
//! The crate is organised the way a run flows:
//!
//! * [`model`] samples a correlated pair and splits each symmetric matrix into
//!   a directed matrix with independent entries.
//! * [`gaussquad`] evaluates the two-sided bivariate tail functional and the
//!   constants derived from it.
//! * [`spectral`] holds the eigen/subspace machinery used to pick test
//!   directions.
//! * [`matcher`] is the iterative engine (seeded and seedless entry points).
//! * [`oracle`] brute-forces tiny instances and scores outcomes against the
//!   latent matching.
//! * [`diagnostics`] measures the concentration quantities of a finished run.
//! * [`harness`] is the CLI, config handling and parameter sweeps.

pub mod diagnostics;
pub mod error;
pub mod gaussquad;
pub mod harness;
pub mod io;
pub mod matcher;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod spectral;

pub use error::{Error, Result};
