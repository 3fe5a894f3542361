//! Experiment engine: metrics, reports, heatmaps, and the pipeline
//! orchestrator behind the CLI.

pub mod config;
mod experiment;
mod heatmap;
mod metrics;
mod report;

pub use config::{parse_pixel, ExperimentConfig, GridEntry, PixelValue};
pub use experiment::{cached_attack, purify_images, run_experiment_from_text, ExperimentOutput};
pub use heatmap::{heatmap_export, heatmap_import};
pub use metrics::{
    accuracy, attention_metrics, attention_of, attention_report, predictions, AttentionRow,
};
pub use report::{
    aggregate, records_from_csv, records_to_csv, ConditionRow, EvalReport, ReportProvenance,
    SampleRecord,
};
