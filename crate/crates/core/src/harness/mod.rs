//! Experiment orchestration: teacher training, resumable strategy sweeps,
//! table rendering and the angle diagnostic over saved runs.
//!
//! A sweep directory looks like
//!
//! ```text
//! plan.toml
//! teacher/checkpoint/...   teacher/metrics.json
//! runs/<run id>/manifest.json log.ndjson evals.ndjson metrics.json DONE checkpoint/...
//! results.ndjson report.txt report.tsv
//! ```

mod plan;
mod report;
mod run;

pub use plan::{Cell, ExperimentPlan, TaskSpec, TeacherPlan};
pub use report::{aggregate, mean_std, render, report_tables, ReportTables, TableRow};
pub use run::{
    analyze_geometry, analyze_run_geometry, load_teacher, read_result, run_sweep, run_sweep_with, sharded_angle_report,
    summary_line, train_teacher, GeometryOptions, GeometryOutcome, Layout, LossSummary, RunManifest, RunResult,
    RunStatus, SweepOutcome, TeacherReport, DONE_MARKER,
};
