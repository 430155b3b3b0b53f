//! Short-run statistical process control over heterogeneous product portfolios.
//!
//! Every product in a portfolio gets its own location and spread estimate, its
//! lots are standardized with those estimates, and the pooled series (in
//! production order) is monitored with an individuals/moving-range chart or an
//! EWMA chart. When the pooled chart signals, a regression partition tree over
//! the lots' process factors points at candidate root causes.
//!
//! The [`simulate`] module holds the Monte Carlo machinery used to compare
//! standardization variants by average run length.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN

pub mod charts;
pub mod cli;
pub mod error;
pub mod estimators;
pub mod ingest;
pub mod roottree;
pub mod simulate;
pub mod standardize;
pub mod svg;

pub use error::{Error, Result};
