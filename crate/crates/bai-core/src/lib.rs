//! Desk-scale RLHF laboratory.
//!
//! The crate trains a tiny from-scratch transformer on a synthetic arithmetic
//! task, builds reward models with engineered biases, runs PPO against them,
//! and studies how the actor's initialization — in particular weighted merges
//! of base and SFT checkpoints — changes the training dynamics. Everything is
//! bit-reproducible: same config and seed give byte-identical metrics and
//! checkpoint digests at any thread count.

pub mod analysis;
pub mod cli;
pub mod det;
pub mod error;
pub mod merge;
pub mod gae;
pub mod model;
pub mod plot;
pub mod ppo;
pub mod run;
pub mod synth;
pub mod rng;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
