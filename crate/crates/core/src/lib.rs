//! Mixture-of-Experts transformer with attention-driven dynamic expert
//! allocation.
//!
//! Each token's importance is read off the attention weights of the block it
//! is in, and the token is routed to `ceil(importance * E)` experts subject to
//! per-expert capacity. A fixed-K router is included as the baseline.

pub mod attention;
pub mod error;
pub mod harness;
pub mod importance;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod router;

pub use error::{Error, Result};
