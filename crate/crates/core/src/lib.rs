//! Deterministic simulator of wireless federated LoRA fine-tuning.
//!
//! The crate is organised bottom-up:
//!
//! - [`matcore`]: dense matrices and seeded random streams.
//! - [`lora`]: adapters, the orthogonality penalty and per-rank scores.
//! - [`soft`]: rank-aware sparsification with error feedback, plus baselines.
//! - [`channel`]: FDMA uplink model (fading, rates, delays, scheduling).
//! - [`controller`]: offline rank selection and per-round Lyapunov control.
//! - [`bounds`]: convergence-bound terms and sparsification-error bounds.
//! - [`fedloop`]: the synthetic task and the federated training loop.
//! - [`config`] / [`metrics`]: experiment configuration and emitted records.

pub mod bounds;
pub mod channel;
pub mod config;
pub mod controller;
mod error;
pub mod fedloop;
pub mod lora;
pub mod matcore;
pub mod metrics;
pub mod soft;

pub use error::{Error, Result};
pub use matcore::{Matrix, SimRng, Stream};
