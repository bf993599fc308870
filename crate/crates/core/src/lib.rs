//! Training core for entropy-gated selective policy optimization (EG-SPO).
//!
//! EG-SPO is a three-stage hybrid training pipeline for autoregressive
//! sequence policies:
//!
//! 1. supervised warm-up on expert demonstrations ([`sft`]),
//! 2. grouped rollout generation with per-token predictive entropy and
//!    group-normalized outcome advantages ([`rollout`]),
//! 3. a joint update mixing the expert cross-entropy with an entropy-gated
//!    clipped policy-gradient loss on the rollouts ([`gate`], [`trainer`]).
//!
//! In the gated loss the top-ρ fraction of each rollout's tokens by entropy
//! receive the full clipped PPO term and the rest receive the same term scaled
//! by `φ(p) = p(1 − p)`. Both branches keep the advantage, so tokens of a
//! failed rollout are never pushed up.
//!
//! The crate is `no_std` (with `alloc`) and performs no IO. Wall-clock time
//! is injected through [`Clock`]; file formats and the command line live in
//! the companion `egspo` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod audit;
pub mod error;
pub mod gate;
pub mod math;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod sft;
pub mod tape;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
pub use gate::{GateConfig, GateDecision, PhiSource, Variant};
pub use policy::{ModelConfig, Policy, PolicyParams, TokenDist, Vocab};
pub use rng::{DetRng, RngState};
pub use rollout::{RolloutGroup, Trajectory};
pub use tasks::{Reward, TaskInstance};
pub use trainer::{Clock, RunRecord, TrainConfig, Trainer};
