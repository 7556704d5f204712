//! Experiment pipelines, metrics and report files.

pub mod dataset;
pub mod metrics;
pub mod pipeline;

pub use dataset::{build_dataset, read_jsonl, training_set, write_jsonl, DatasetOptions, OpfRecord, Target};
pub use metrics::{ecdf, kmeans, quantile, rpe, rpe_with, summarize};
pub use pipeline::{run_pipeline, EvaluationReport, Method, PipelineConfig, Surrogate};
