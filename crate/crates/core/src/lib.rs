//! Truncated inverse-propensity-weighted quantile estimation under limited
//! overlap.
//!
//! When propensity scores pile up near 0 or 1, the IPW quantile estimator is
//! no longer asymptotically normal. Its limit law is infinitely divisible and
//! its rate is governed by the tail of the propensity law near the boundary.
//! This crate provides the estimators, the scaling sequences, samplers for the
//! limit laws, subsampling inference and a simulation lab for checking the
//! asymptotics on synthetic designs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli_io;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod limit_law;
pub mod numerics;
pub mod propensity;
pub mod quantile_core;
pub mod sim_lab;
pub mod tail_scaling;

pub use error::{Error, ErrorFamily, Result};
