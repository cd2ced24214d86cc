//! Plan-driven experiment analysis: job planning, parallel dispatch, result
//! documents and the naive-versus-optimized benchmark.

pub mod bench;
pub mod plan;
pub mod run;
pub mod telemetry;

pub use bench::{run_bench, BenchReport, Mode};
pub use plan::{AnalysisPlan, JobKind, JobUnit};
pub use run::{run_plan, ResultDocument, RunOptions};
