//! Desk-scale autoregressive transformer inference engine with pluggable
//! fixed-size KV-cache scheduling.
//!
//! The pieces, bottom up:
//!
//! - [`numkernel`]: deterministic f32 matrix/softmax/GRU/Adam kernels.
//! - [`model`]: a byte-level decoder-only transformer, trainable with
//!   optional top-K attention masking, plus attention-trace collection.
//! - [`kvcache`]: fixed-capacity per-layer KV store, eviction policies
//!   (window, strided, sink, heavy-hitter, adaptive), the exact top-K
//!   oracle, and the row-slicing-as-multiplication kernel.
//! - [`controller`]: the GRU keep-probability scorer, label construction
//!   from traces, and its trainer.
//! - [`engine`]: decode sessions gluing the above together, including
//!   KV-state rebuild of previously released tokens.
//! - [`harness`]: CLI, corpus ingestion, throughput/perplexity benchmarks,
//!   and the uniform-policy analysis reports.
//! - [`io`]: binary checkpoint ("ADCK") and trace ("ADTR") formats.

pub mod controller;
pub mod engine;
mod error;
pub mod harness;
pub mod io;
pub mod kvcache;
pub mod model;
pub mod numkernel;

pub use error::{Error, Result};
