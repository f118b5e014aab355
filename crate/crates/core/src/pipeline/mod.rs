//! Run configuration, the three training stages with persisted artifacts,
//! the budgeted method comparison and the run manifest.

mod compare;
mod config;
mod manifest;
mod stages;

pub use compare::{median, planned_budget, run_comparison, ComparisonOutcome, ABLATION_NAME};
pub use config::{CompareConfig, EvalConfig, Method, ReflowConfig, RunConfig, TaskConfig, CONFIG_SCHEMA_VERSION};
pub use manifest::{sha256_hex, FileEntry, OutputDir, RunManifest, Timestamps, MANIFEST_FILE, MANIFEST_FORMAT_VERSION};
pub use stages::{
    evaluate, run_stage1, run_stage2, run_stage3, step_forward_equivalents, train_flow_stage, train_meanflow_stage,
    CurvePoint, CurveProbe, Generator, Reflow, TrainedFlow, TrainedMeanFlow,
};
