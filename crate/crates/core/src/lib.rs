//! Desk-scale study of transferring in-context learning from a meta-trained
//! language model to vision-language tasks.
//!
//! The stack, bottom to top:
//!
//! - [`tensor`], [`kernels`], [`graph`]: dense row-major tensors, shared
//!   numeric kernels, and a reverse-mode autodiff tape, generic over `f32`
//!   and `f64` through the [`Scalar`] trait.
//! - [`optim`], [`checkpoint`], [`rng`]: named parameter groups with Adam,
//!   bit-exact binary checkpoints, and counter-based seed derivation so every
//!   random draw is a pure function of (master seed, purpose, indices).
//! - [`vocab`], [`lm`]: a closed word-level vocabulary and a small decoder-only
//!   transformer that accepts an optional prefix of externally produced
//!   embedding vectors in place of token embeddings.
//! - [`tasks`], [`meta`]: synthetic text task families and the meta-training
//!   loop that teaches the frozen model to read k-shot prompts, plus the
//!   plain-LM baseline trained on the same text without episode structure.
//! - [`scenes`], [`frontend`], [`vl`]: a procedural grid-scene world with
//!   exact captions and QA, a patch encoder with a learned visual prefix, and
//!   the captioning loop that trains vision against the frozen language model.
//! - [`harness`], [`metrics`]: k-shot in-context evaluation with greedy
//!   decoding and answer matching, and deterministic metrics reports.
//! - [`config`], [`pipeline`], [`selftest`]: run configuration, artifact
//!   orchestration (prepare/train/eval/report), and fast end-to-end checks.

pub mod checkpoint;
pub mod config;
pub mod frontend;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod lm;
pub mod meta;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scenes;
pub mod selftest;
pub mod tasks;
pub mod tensor;
pub mod vl;
pub mod vocab;

pub use tensor::{Scalar, Tensor};
