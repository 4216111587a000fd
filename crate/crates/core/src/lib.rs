//! Numerical laboratory for the rank-versus-heads trade-off in attention.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] samples points on spheres and Haar-random orthonormal frames.
//! * [`attention`] evaluates softmax/hardmax heads, generalized heads, the
//!   self-masked layer and the two-layer transformer with positional codes.
//! * [`targets`] holds the exact target functions and the `psi_a` step sum.
//! * [`constructions`] builds explicit parameter sets (full-rank nearest,
//!   biased heads, the two-layer majority transformer, the mode network).
//! * [`quadrature`] and [`spectral`] cover ultraspherical expansions,
//!   harmonic dimension counts and the lower-bound sum.
//! * [`montecarlo`] estimates expectations with standard errors.
//! * [`trainer`] fits small attention models with analytic gradients.
//! * [`io`] and [`cli`] handle JSON/CSV formats and the command line.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod cli;
pub mod constructions;
pub mod error;
pub mod geometry;
pub mod io;
pub mod montecarlo;
pub mod quadrature;
pub mod spectral;
pub mod targets;
pub mod trainer;

pub use error::{Error, Result};

/// Version string recorded in run manifests.
pub const ARTIFACT_VERSION: &str = concat!("rankheads ", env!("CARGO_PKG_VERSION"));
