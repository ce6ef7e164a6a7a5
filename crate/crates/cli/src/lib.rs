//! Benchmark harness for the vparcel runtime: configuration, two-rank
//! execution, and CSV reporting. The `vparcel-bench` binary is a thin
//! CLI over [`run`].

pub mod config;
pub mod csv;
pub mod runner;

pub use config::{BenchConfig, BenchRecord, BenchResult, BenchmarkKind};
pub use csv::{emit_csv, CSV_COLUMNS};
pub use runner::{
    median, parcel_hash, run, run_attentiveness, run_flood, run_many, run_pingpong, HarnessError,
};
