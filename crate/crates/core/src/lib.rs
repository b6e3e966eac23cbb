//! Bidirectional attention-based translation with agreement training.

// `!(x > 0.0)` is used on purpose so NaN fails the check as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agreement;
pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod decode;
pub mod metrics;
pub mod model;
pub mod trainer;
