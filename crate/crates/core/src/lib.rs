//! Domain adaptation for sequence-to-sequence transformers by gradual
//! pruning.
//!
//! A general-domain model is trained, then pruned layer by layer to an
//! informative sub-network that is frozen. Each target domain claims a small,
//! disjoint slice of the freed parameters (its lottery sub-network), found by
//! a short warm-up and magnitude pruning, and tunes only that slice. Decoding
//! a domain applies a binary mask selecting its own elements plus those of its
//! ancestors, so earlier domains are unaffected by later ones.
//!
//! Modules, bottom up:
//!
//! - [`tensor`]: dense tensors, graphs with reverse-mode autodiff, masked Adam
//! - [`model`]: the encoder-decoder, adapters and beam search
//! - [`masks`]: per-element domain ownership and mask derivation
//! - [`pruning`]: sparsity schedules and per-layer magnitude pruning
//! - [`train`]: the shared masked training loop
//! - [`adaptation`]: the pruning-then-tuning pipeline
//! - [`baselines`]: fine-tuning, layer freezing, adapters, EWC, distillation
//! - [`harness`]: synthetic corpora, metrics and experiment orchestration

pub mod adaptation;
pub mod baselines;
pub mod error;
pub mod harness;
pub mod masks;
pub mod model;
pub mod pruning;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
