//! Online control of linear dynamical systems with adversarial disturbances
//! and convex costs, via disturbance-action policies and online convex
//! optimization with memory.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod error;
#[cfg(feature = "cli")]
pub mod harness;
pub mod lds;
pub mod linalg;
pub mod oco;
pub mod policy;
pub mod svg;
pub mod transfer;

pub use error::{ControlError, Result};
