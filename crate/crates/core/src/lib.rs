//! Consensus-based rare event estimation with an adaptive step-size controller.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cbs;
pub mod densities;
pub mod driver;
pub mod enkf;
pub mod error;
pub mod numkit;
pub mod problems;
pub mod smoothing;
pub mod stepctl;

pub use error::{Error, Result};
