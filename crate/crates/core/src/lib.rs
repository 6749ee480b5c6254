//! Numerical laboratory for the generalized Ricci flow
//!
//! ∂g = −2 Rc + ½ H²,  ∂H = Δ_g H
//!
//! on periodic grids, together with the lowest eigenvalue λ of
//! Φ = −4Δ + R − |H|²/12, its gradient flow, and an exact reduction to
//! left-invariant data on three-dimensional Lie groups.

// index loops mirror the tensor formulas; `!(x > y)` is how NaN is rejected
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod experiment;
pub mod flow;
pub mod geometry;
pub mod homogeneous;
pub mod lattice;
pub mod spectrum;

pub use geometry::MetricField;
pub use lattice::{Grid, ScalarField, TensorField, TensorKind};
