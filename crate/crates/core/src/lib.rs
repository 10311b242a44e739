//! Stepwise-regression stereo refinement with range-controlled disparity
//! clips, clip-balanced losses, and edge pseudo-label fine-tuning.
//!
//! Everything here is pure computation over `alloc`; file formats,
//! configuration and the command line live in the `srstereo` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod backbone;
pub mod edge;
pub mod error;
pub mod field;
pub mod grad_suite;
pub mod gradcheck;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod regression;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use field::{DisparityMap, Grid, Image, Mask, ScalarField};
pub use tensor::Tensor;
