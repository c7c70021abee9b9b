//! Slow, obviously-correct reference implementations.
//!
//! Nothing here shares code with `forge-core`; tests compare the two.

pub mod bpe;
pub mod clean;
pub mod layout;
