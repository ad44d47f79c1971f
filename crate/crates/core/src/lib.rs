//! Data-regularized diffusion RL on synthetic tasks.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diffusion;
pub mod error;
pub mod grad;
pub mod net;
pub mod oracle;
pub mod par;
pub mod reward_service;
pub mod rl;
pub mod schedule;
pub mod sft;
pub mod tasks;
pub mod verify;

pub use error::{Error, Result};
