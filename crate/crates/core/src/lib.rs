//! Fitting, validation and planning toolkit for transfer scaling laws that
//! predict downstream loss from pre-training and fine-tuning budgets.

// `!(x > 0.0)` style guards are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fitter;
pub mod ingest;
pub mod model;
pub mod planner;
pub mod report;
pub mod selection;
pub mod synth;
pub mod uncertainty;

pub use error::{Error, Result};
