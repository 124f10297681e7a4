//! Surrogate models for the parametric 2D Poisson equation.
//!
//! Three training paradigms over one UNet heteroencoder:
//!
//! * supervised CNN regression on labeled data,
//! * CPINN — mean-squared PDE residual through a fixed 5-point Laplacian
//!   convolution,
//! * DCRM — direct minimization of the Simpson-discretized energy functional.
//!
//! A finite-difference reference solver generates labels and serves as the
//! verification oracle. All numerics are 64-bit.

pub mod boundary;
pub mod error;
pub mod grid;
pub mod losses;
pub mod net;
pub mod problems;
pub mod quadrature;
pub mod solver;
pub mod stencil;
pub mod train;

pub use error::{Error, Result};
pub use grid::{
    compute_stats, denormalize, normalize, read_dataset, write_dataset, CaseId, ChannelStats,
    Dataset, FieldBatch, GridSpec, ScalarField2D,
};
