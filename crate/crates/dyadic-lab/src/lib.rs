//! Numerical laboratory for dyadic harmonic analysis on `[0,1)^d`.
//!
//! The crate builds the objects of weighted dyadic theory — Haar and Wilson
//! systems, A2 weights, disbalanced Haar decompositions, paraproducts, the
//! Haar shift and Haar multiplier — on truncated dyadic grids, verifies the
//! exact algebraic decompositions of the shift and multiplier compositions as
//! machine-precision identities, and measures every Carleson-type inequality
//! constant against the A2 characteristic.
//!
//! Start with the `examples/` directory: each example is a runnable tour of
//! one capability. The `dyadic-lab` binary drives batch experiments
//! (identity suites, inequality sweeps, norm-vs-A2 scaling studies).

pub mod embed;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod haar1d;
pub mod shiftops;
pub mod weight;
pub mod wilson;

pub use error::{Error, Result};
pub use grid::{CellIndex, GridSpec, StepFunction};
pub use weight::Weight;

/// Relative tolerance for the exact algebraic identities (decompositions,
/// product formulas): they hold to rounding error, asserted at this level.
pub const IDENTITY_RTOL: f64 = 1e-9;

/// Absolute tolerance for orthonormality and pointwise basis identities.
pub const ORTHO_TOL: f64 = 1e-12;

/// Relative error helper used throughout: |a-b| scaled by the larger magnitude
/// (or 1 if both are tiny).
pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-30);
    (a - b).abs() / scale
}
