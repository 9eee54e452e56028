//! Desk-scale laboratory for backdoor data poisoning on toy multimodal
//! masked-diffusion language models, and the DiSP defense: Fisher-Jacobian
//! saliency over visual tokens, persistent visual masking during generation,
//! dataset purification, and re-fine-tuning.
//!
//! Everything runs on 64-bit floats with a minimal tape-based reverse-mode
//! autodiff core. All randomness flows through seeded, hand-rolled generator
//! streams so every experiment is bit-reproducible. The crate is `no_std`
//! (alloc only); IO, file formats, the CLI, and thread-pool drivers live in
//! the companion `disp-lab` crate.
//!
//! Module map:
//! - [`tensor`]: dense 2-D tensors, the op tape, reverse-mode gradients.
//! - [`rng`]: deterministic derived random streams.
//! - [`vocab`]: the toy token inventory.
//! - [`model`]: the diffusion LM — masking schedule, loss, training, sampling.
//! - [`data`]: synthetic task generator, triggers, attack targets, poisoning.
//! - [`saliency`]: Fisher matrix, exact quadratic-form saliency, Hutchinson probes.
//! - [`purify`]: masked-embedding purification and the full defense pipeline.
//! - [`baselines`]: random drop, magnitude pruning, oracle filtering.
//! - [`eval`]: attack-success judging, clean performance, sweeps, ablations.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod purify;
pub mod rng;
pub mod runner;
pub mod saliency;
pub mod tensor;
pub mod vocab;

pub use error::{CoreError, Result};
pub use runner::{Runner, Sequential};
