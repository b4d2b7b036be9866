// Index loops over fixed small dimensions are the clearest form for this
// tensor-heavy code; iterator rewrites obscure the math.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Deformable image registration with a pointwise hyperelastic
//! equilibrium-gap regularizer.
//!
//! The crate provides:
//! - closed-form Neo-Hookean mechanics and the pointwise equilibrium-gap
//!   penalty with exact forward-mode sensitivities ([`mechanics`]);
//! - a cubic B-spline free-form displacement field with analytic first and
//!   second derivatives ([`field`]);
//! - MetaImage volume IO, interpolation, masks and landmarks ([`image`]);
//! - similarity metrics and the bending-energy baseline ([`loss`]);
//! - the stochastic Adam registration engine ([`engine`]);
//! - a synthetic plane-strain hyperelastic benchmark generator ([`synth`]);
//! - quantitative evaluation: TRE, percent error, Jacobian audits ([`eval`]).

pub mod engine;
pub mod eval;
pub mod field;
pub mod image;
pub mod loss;
pub mod mechanics;
pub mod synth;
pub mod tensor;
