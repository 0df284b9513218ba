//! Privacy-preserving unsupervised domain adaptation.
//!
//! A source party trains an encoder and classifier (optionally with DP-SGD),
//! summarizes its features with per-class Gaussian mixtures and ships a
//! [`share::SharePackage`]. A target party adapts its own encoder against
//! features resampled from those mixtures, never touching source data.

// Range checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod benchmark;
pub mod data;
pub mod dp;
pub mod error;
pub mod gmm;
pub mod metrics;
pub mod mia;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod share;
pub mod tensor;
pub mod uda;

pub use error::{Error, Result};
pub use tensor::Matrix;
