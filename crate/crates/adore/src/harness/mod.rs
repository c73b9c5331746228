//! Benchmark and analysis harness plus the command-line interface.

pub mod analyze;
pub mod bench;
pub mod cli;
pub mod corpus;
pub mod ppl;
pub mod report;

pub use analyze::{analyze_uniform_policy, AnalyzeReport, LayerAnalysis};
pub use bench::{bench_throughput, BenchReport, BenchRow, BenchSummary};
pub use corpus::{bytes_to_windows, ingest_corpus, synth_corpus, windows_to_bytes};
pub use ppl::{eval_policies_ppl, eval_policy_ppl, nll_of, PolicyEval};
