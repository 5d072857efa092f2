//! Fused-virtual-token compression for multimodal in-context learning.
//!
//! Each image-text demonstration is forwarded through the first `N` layers of
//! a small frozen multimodal transformer; the hidden states above its text
//! positions are projected by a single trainable linear layer into *fused
//! tokens* that replace the whole demonstration in the prompt. The library
//! measures the correctness, memory, perplexity, and throughput effects of
//! that substitution against full-token baselines.
//!
//! Entry points, roughly bottom-up:
//! - [`tensor`]: dense f64 tensors with reverse-mode autodiff on a tape
//! - [`backbone`]: the frozen toy model (vision encoder, byte tokenizer,
//!   decoder layers) with per-layer access
//! - [`aggregator`] / [`bank`]: demonstration -> fused tokens, plus the
//!   persistent demonstration bank
//! - [`engine`] / [`prompt`] / [`rices`]: prompt assembly, greedy generation,
//!   perplexity, attention-mass analysis, retrieval
//! - [`trainer`] / [`synth`]: projection-layer training on a synthetic
//!   interleaved image-text corpus
//! - [`cost`] / [`bench`]: remaining-ratio and attention-cost models, the
//!   throughput benchmark and the experiment grid
//!
//! Each runnable capability has a matching example under `examples/`; the
//! `icl-fusion` binary exposes the same operations as subcommands.

pub mod cli;
pub mod counters;
pub mod digest;
pub mod aggregator;
pub mod backbone;
pub mod bank;
pub mod engine;
pub mod bench;
pub mod config;
pub mod cost;
pub mod corpus_io;
pub mod error;
pub mod report;
pub mod synth;
pub mod trainer;
pub mod prompt;
pub mod rices;
pub mod weights_io;
pub mod image;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
