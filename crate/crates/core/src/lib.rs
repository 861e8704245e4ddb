//! Tensor tomography on asymptotically conic 3-manifolds.
//!
//! The crate evaluates metrics of the form `dx²/x⁴ + g̃/x²` near the conic end
//! of a manifold with link `S²` or `T²`, integrates their geodesics, computes
//! the geodesic X-ray transform of functions, one-forms and symmetric
//! 2-tensors, and assembles the exponentially conjugated normal operator
//! together with the gauge operators used to recover tensors modulo
//! potentials. The `symbolics` module evaluates principal symbols of all
//! these operators and certifies their ellipticity on the gauge kernel.

// `!(x > 0.0)` rejects NaN along with non-positive values; index loops mirror
// the tensor formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod config;
pub mod error;
pub mod field;
pub mod gauge;
pub mod geodesic;
pub mod geometry;
pub mod ode;
pub mod quadrature;
pub mod recon;
pub mod symbolics;
pub mod xray;

pub mod cli;

pub use error::{Error, Result};
