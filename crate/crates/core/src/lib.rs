#![allow(clippy::neg_cmp_op_on_partial_ord)] // negated comparisons reject NaN

pub mod error;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod pose;
pub mod simulator;

pub use error::{Error, Result};
