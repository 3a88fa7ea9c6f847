//! Mixture-of-Experts transformer language models with top-k and
//! confidence-threshold (top-p) expert routing.
//!
//! The crate covers the full loop at desk scale: a small reverse-mode
//! tensor engine, routers and MoE layers, the auxiliary routing losses,
//! a LLaMA-style decoder, an AdamW trainer with checkpointing, and the
//! routing instrumentation used to study how many experts each token
//! activates.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod corpus;
pub mod error;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod objectives;
pub mod router;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
