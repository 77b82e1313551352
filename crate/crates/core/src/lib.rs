//! Robust quickest change detection with Wasserstein ambiguity sets.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod detect;
pub mod error;
pub mod lfd;
pub mod sim;
pub mod space;
pub mod transport;

pub use error::{Error, Result};
