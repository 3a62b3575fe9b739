//! Movement-primitive trajectory generation with a multi-step diffusion
//! teacher and a one-step consistency-distilled student.
//!
//! The crate is organised bottom-up:
//!
//! * [`prodmp`] closed-form movement primitive basis, decoding and fitting.
//! * [`nn`] small feed-forward approximators with hand-written reverse mode.
//! * [`space`] the standardized parameter/trajectory frame shared by the
//!   learning components.
//! * [`teacher`] noise schedule, denoiser, probability-flow sampler, training.
//! * [`distill`] the one-step student, EMA target and distillation loop.
//! * [`envs`] push-block and ball-catch toy worlds, scripted experts, datasets.
//! * [`control`] receding-horizon execution with latency accounting.
//! * [`metrics`] success-rate intervals, latency summaries and smoothness.
//!
//! Batch work (per-sample gradients, evaluation episodes) goes through
//! [`par`], which uses rayon when the `parallel` feature is enabled and
//! falls back to plain iteration otherwise. Reductions always happen in a
//! fixed order, so results do not depend on the thread count.

pub mod codec;
pub mod control;
pub mod distill;
pub mod envs;
mod error;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod prodmp;
pub mod space;
pub mod teacher;

pub use error::{Error, Result};
