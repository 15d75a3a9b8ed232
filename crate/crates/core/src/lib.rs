//! Characteristics-based solver for a nonlocally coupled multi-follicle
//! conservation law, with the maturity fixed-point iteration, a finite-volume
//! reference scheme and the command-line plumbing around them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod characteristics;
pub mod cli;
pub mod data;
pub mod error;
pub mod fixedpoint;
pub mod fv;
pub mod io;
pub mod model;
pub mod quadrature;
pub mod solution;
pub mod trajectory;
pub mod verify;

pub use error::{Error, Result};
