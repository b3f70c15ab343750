// Checks like `!(x >= 0.0)` are written that way to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod fisher;
pub mod model;
pub mod region;
pub mod stats;
pub mod tasks;
pub mod tensor;
pub mod trainer;
