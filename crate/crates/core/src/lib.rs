//! Newtonian dynamical systems admitting the normal shift of hypersurfaces
//! on Riemannian manifolds.
//!
//! The crate is `no_std` (it needs `alloc`). Everything numerical is generic
//! over [`scalar::Scalar`], so force fields, metrics and connection
//! coefficients can be evaluated over dual numbers to obtain exact
//! derivatives.
//!
//! Layers, bottom-up:
//! - [`expr`]: the analytic-field language (parse, print, evaluate).
//! - [`geometry`]: metrics, Christoffel symbols, the unit direction and
//!   projector, spatial and velocity gradients of extended fields.
//! - [`forcefield`]: generating functions, constructed force fields, the
//!   scalar ansatz and all normality residuals.
//! - [`dynamics`]: integration of the covariant Newton equations.
//! - [`shift`]: normal shifts of hypersurfaces and blow-ups of points.
//! - [`metrizability`]: conformal connections and trajectory inheritance.

#![no_std]
// NaN must fail every range check, and index loops mirror tensor notation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod dynamics;
pub mod expr;
pub mod forcefield;
pub mod geometry;
pub mod linalg;
pub mod metrizability;
pub mod root;
pub mod sampling;
pub mod scalar;
pub mod shift;

mod error;

pub use error::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;
