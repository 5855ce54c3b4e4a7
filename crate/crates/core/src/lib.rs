//! Identification of position-dependent models for single-body flexible
//! motion systems.
//!
//! The crate follows a two-step route. First a modally damped LTI model is
//! identified from frequency-response data ([`frf`], [`lmfd`], [`solver`],
//! [`extract`]). Second, the spatially sampled mode shapes are interpolated
//! with smoothed thin-plate splines ([`tps`]) so the model can be evaluated
//! at any surface coordinate ([`modal::PositionDependentModel`]).
//!
//! [`synth`] provides a reproducible flexible-plate test bench and
//! [`pipeline`] strings all stages together the way the `modalid` binary
//! runs them.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// indexed loops read closer to the math in the numeric kernels
#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod extract;
pub mod frf;
pub mod linalg;
pub mod lmfd;
pub mod modal;
pub mod par;
pub mod pipeline;
pub mod solver;
pub mod synth;
pub mod textio;
pub mod tps;

pub use error::{Error, Result};

/// Complex scalar used throughout.
pub type C64 = nalgebra::Complex<f64>;
/// Dense complex matrix.
pub type CMatrix = nalgebra::DMatrix<C64>;
/// Planar coordinate `(x, y)` in meters.
pub type Coord = [f64; 2];
