//! Adversarial alignment-perturbation training for a small margin-based
//! recognizer.
//!
//! The crate provides the pieces of a min-max training loop in which the
//! inner maximization searches over a four-parameter affine transform
//! (rotation, horizontal/vertical shift, scale) of each training image:
//!
//! - [`geometry`]: centered coordinate conventions and the invertible
//!   transform family, forward and inverse.
//! - [`warp`]: differentiable bilinear warping and analytic derivatives of
//!   warped pixels with respect to the transform parameters.
//! - [`constraint`]: the feasible transform set defined by summed landmark
//!   displacement norms, budget computation, and projection onto it.
//! - [`adversary`]: randomized-step projected sign-gradient ascent producing
//!   adversarial transform parameters per sample.
//! - [`recognizer`]: a toy recognizer with unit-norm embeddings, margin
//!   losses, exact gradients, and momentum SGD.
//! - [`data`]: synthetic landmark-anchored datasets, alignment perturbation,
//!   and lossless dataset I/O.
//! - [`harness`]: configuration, the end-to-end training/evaluation driver,
//!   metrics, gradient checking, and reports.
//!
//! All randomness flows through counter-derived streams ([`rng`]), and all
//! parallel reductions run in a fixed order, so results are bitwise
//! reproducible for a given master seed regardless of worker count. Data
//! parallelism uses rayon when the default `parallel` feature is enabled and
//! falls back to equivalent sequential loops without it.

pub mod adversary;
pub mod constraint;
pub mod data;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod parallel;
pub mod recognizer;
pub mod rng;
pub mod warp;

pub use error::{Error, Result};
pub use geometry::{AffineParams, CenteredPoint, GridShape};
pub use warp::ImageTensor;
