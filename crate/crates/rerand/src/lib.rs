//! Rerandomized experiment design.
//!
//! The crate covers the full workflow around acceptance-sampling designs:
//! generating synthetic populations, declaring balance criteria, drawing and
//! rerandomizing assignments, and analyzing criteria in score space, where
//! balance scores of competing rules reduce to chi-square mixtures.
//!
//! All randomness flows through [`rng::substream`], which derives an
//! independent generator from an explicit seed, a domain tag, and a draw
//! index. Results are reproducible bit for bit for a fixed seed regardless
//! of thread count.

// Validation uses `!(x > 0.0)` so NaN falls into the error arm; numeric
// kernels index several arrays in lockstep; published approximation
// coefficients keep their full decimal expansions.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::excessive_precision
)]

pub mod accum;
pub mod analysis;
pub mod criteria;
pub mod dgp;
pub mod distributions;
pub mod engine;
pub mod error;
pub mod matrix;
pub mod population;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
