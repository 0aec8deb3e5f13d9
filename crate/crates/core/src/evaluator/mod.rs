//! Base and novel inference, view aggregation, metrics and reports.

pub mod metrics;
pub mod report;

pub use metrics::{aggregate_views, entropy, harmonic_mean, predict_base, predict_novel, round1};
pub use report::{
    evaluate, extract_features, per_class_delta, score, EvalReport, InferenceConfig,
    write_delta_csv, SampleFeatures, ViewSource, ViewSpec, SUMMARY_HEADER,
};
