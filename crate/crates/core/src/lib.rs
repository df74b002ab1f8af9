//! Combining the predictions of several frozen classification backbones.
//!
//! Every routine here works on exported per-example logits and features; no
//! model inference happens in this crate. The modules mirror the pipeline:
//!
//! - [`npy`] and [`bundle`]: on-disk matrices and the JSON manifest that ties
//!   backbones, labels and splits together.
//! - [`metrics`]: accuracy, oracle upper bound, diversity and overlap tables.
//! - [`combine`]: non-parametric combiners (logit averaging, voting, entropy
//!   based selection).
//! - [`calibration`]: per-backbone temperature fitting and the calibrated
//!   combiners.
//! - [`fixed`]: input-independent learned temperature vectors (genetic search
//!   and gradient fitted).
//! - [`nlc`]: the input-conditioned temperature controller.
//! - [`cascade`]: cost-aware sequential evaluation with confidence exits.
//! - [`fewshot`]: n-shot sampling, stratified holdouts and linear probes.
//! - [`synth`]: synthetic bundles with controllable accuracy and diversity.
//! - [`report`]: per-run result rows and their aggregation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundle;
pub mod calibration;
pub mod cascade;
pub mod combine;
pub mod error;
pub mod fewshot;
pub mod fixed;
pub mod matrix;
pub mod metrics;
pub mod nlc;
pub mod npy;
pub mod optim;
pub mod report;
pub mod synth;

pub use bundle::{BackboneEntry, DatasetBundle, SplitData, ValidationReport};
pub use combine::LogitStack;
pub use error::{Error, Result};
pub use matrix::{Labels, Matrix};
