#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::manual_is_multiple_of)]

pub mod cli;
pub mod convex;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod metrics;
pub mod sel;
pub mod spectral;
pub mod ufm;
pub mod verify;

pub use error::{Result, SeliError};
