//! Slide-level biomarker screening with gated-attention multiple-instance
//! learning.
//!
//! The crate covers the whole path from a grayscale slide raster to a
//! screening-impact estimate:
//!
//! * [`slideprep`] finds tissue with Otsu thresholding, cuts tiles, applies
//!   the minimum-area quality check and stores feature bags in a compact
//!   binary format.
//! * [`synthgen`] generates synthetic cohorts with planted witness tiles and
//!   clinically coupled covariates.
//! * [`milnet`] holds the gated-attention model, covariate fusion,
//!   hand-derived gradients and the tile-supervised baseline.
//! * [`protocol`] runs the repeated-split training protocol and picks
//!   replicate winners.
//! * [`metrics`] computes AUC, ROC curves, bootstrap intervals, stratified
//!   AUC, logistic importance and attention summaries.
//! * [`impact`] turns an ROC curve and national statistics into untreated
//!   patient counts, and simulates trial enrollment.
//!
//! Everything that draws random numbers takes an explicit seed, and
//! parallel work derives per-item seeds so that results do not depend on
//! the thread count.

pub mod error;
pub mod impact;
pub mod metrics;
pub mod milnet;
pub mod numkit;
pub mod protocol;
pub mod slideprep;
pub mod synthgen;

pub use error::{Error, Result};

// Code blocks in the guide are compiled and run as doc tests.
#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/tiling.md")]
    mod tiling {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/impact.md")]
    mod impact {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
