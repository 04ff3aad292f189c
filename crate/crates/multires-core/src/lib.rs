//! Multi-resolution semi-supervised classification.
//!
//! Trains binary classifiers at several spatial resolutions jointly: each
//! fine-resolution model fits its own labeled data while being regularized,
//! on unlabeled instances, toward agreement with the coarser model that
//! covers the same region. Agreement is measured either through a smooth
//! maximum over the fine predictions in a coarse cell (multiple-instance
//! style) or through an attention-weighted embedding of those instances.
//!
//! Crate layout:
//! - [`tape`]: dense f64 tensors and reverse-mode automatic differentiation
//! - [`gradcheck`]: finite-difference gradient verification
//! - [`data`]: multi-resolution datasets, spatial correspondence, fold splits
//! - [`io`]: CSV import/export with bit-exact float round-trips
//! - [`synth`]: synthetic grid benchmark generator
//! - [`model`]: logistic-regression and one-hidden-layer classifiers
//! - [`consistency`]: smooth-max and attention consistency penalties
//! - [`train`]: training loop, baselines, cross-validation, metrics

pub mod consistency;
pub mod data;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod train;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{ElementwiseOp, Tape, Tensor, TensorError, TensorId};
