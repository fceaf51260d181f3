//! THOR tool-integrated reasoning engine.

// `!(x >= 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod client;
pub mod inference;
pub mod rl;
pub mod rollout;
pub mod sandbox;
pub mod tirgen;
pub mod trajectory;

#[cfg(test)]
mod test_support;
