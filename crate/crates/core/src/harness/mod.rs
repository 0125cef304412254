//! Run configuration, the benchmark loop, the JSONL result store and
//! report emission.

pub mod config;
pub mod report;
pub mod run;
pub mod store;

pub use config::{PreparedDataset, RunConfig};
pub use report::{emit_report, ReportMode};
pub use run::{run_benchmark, run_sweep, RunSummary, SweepRequest};
pub use store::{read_store, without_timing, Record, StoreContents, StoreWriter, SweepRecord, TaskRecord, SCHEMA_VERSION};
