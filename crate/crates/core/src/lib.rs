//! Object-level rotation-equivariant 3D detection on synthetic point clouds.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autograd;
pub mod cli;
pub mod detector;
pub mod eqvnet;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod parallel;
pub mod rotgroup;
pub mod scenegen;
pub mod suspension;

pub use autograd::Real;
pub use error::{EonError, Result};
