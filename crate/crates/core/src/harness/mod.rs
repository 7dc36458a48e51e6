//! Streaming experiment driver: configuration, training loop, baselines,
//! checkpoints, synthetic data and result aggregation.

mod config;
mod report;
mod synth;
mod train;

pub use config::{ExperimentConfig, OptimizerKind, Strategy};
pub use report::{aggregate, find_summaries, read_summary, ComparisonTable, SummaryRow};
pub use synth::{regimes, synthetic_stream, Regime, SynthSpec};
pub use train::{
    clip_global_norm, evaluate_metrics, initial_model, metrics_denormalized, run_stream_experiment, segment_rng,
    train_segment, train_step, write_losses, write_summary, Adam, CheckpointRecord, EpochLog, ExperimentOutcome,
    LossRow, Optimizer, SegmentReport, StreamData, SUMMARY_HEADER,
};
