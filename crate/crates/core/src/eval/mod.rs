//! Downstream evaluation, ablations, sweeps and inspection artifacts.

pub mod experiments;
pub mod heatmap;
pub mod plot;
pub mod probe;

pub use experiments::{
    run_ablation, sweep_lambda, write_results_csv, AblationSpec, ExperimentData, ExperimentOutcome, ResultRow,
    SweepOutcome, RESULTS_HEADER,
};
pub use heatmap::{export_heatmap, HeatmapArtifact};
pub use probe::{
    finetune, finetune_encoder, linear_probe, linear_probe_encoder, EvalConfig, ProbeOptions, ProbeResult, Protocol,
};
