//! Numerical core for one-step video super-resolution distillation.
//!
//! The crate is `no_std` and needs only `alloc`. It covers the flow-matching
//! primitives, a compact video denoiser with a reverse-mode gradient tape,
//! deterministic synthetic video data, the training stages (pretraining,
//! guided progressive distillation, dual-stream distillation, preference
//! refinement), and evaluation metrics. File formats and the command-line
//! front end live in the `vsrdistill` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod denoiser;
pub mod dpo;
pub mod dual;
pub mod error;
pub mod eval;
pub mod flow;
pub mod oracle;
pub mod heads;
pub mod params;
pub mod pgd;
pub mod rng;
pub mod tape;
pub mod train;
pub mod video;

pub use error::{Error, Result};
pub use flow::{CondLabel, ConditionBundle};
pub use video::{LatentVideo, Shape, Timestep};
