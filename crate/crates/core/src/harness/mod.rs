//! Data ingestion, synthetic data, metrics and the staged experiment pipeline.

pub mod config;
pub mod gradsuite;
pub mod log;
pub mod metrics;
pub mod pipeline;
pub mod synth;

pub use config::{hash_json, EvalConfig, ExperimentConfig};
pub use gradsuite::{grad_suite, GradCheckLine};
pub use log::{context, ingest, read_items, split_leave_last_out, write_jsonl, HeldOut, InteractionLog, SplitSpec, Target};
pub use metrics::{ndcg_at_k, recall_at_k, DomainMetrics, MetricsReport, VariantReport};
pub use pipeline::{run_experiment, Dataset, Pipeline, ABLATIONS, FULL, STAGES};
pub use synth::{domain_name, synth_generate, SynthConfig, SynthData, SynthLabels};
