//! Synthetic subject/style/structure benchmark, disentanglement metrics and
//! ablation runners.

mod ablation;
mod data;
mod metrics;

pub use ablation::{
    composition_metrics, eval_routes, evaluate, gate_accuracy, leading_trailing, projection, run, run_ablation, Arm,
    CompositionMetrics, EvalSummary, MetricReport, PointKind, ProjectionPoint, RunOutcome, StageTimings, LOSS_WINDOW,
};
pub use data::{generate, train_eval_split, Benchmark, SynthSample, TaskKind, MIN_CENTER_SEPARATION};
pub use metrics::{pca_2d, separation_ratio, struc_sim, RATIO_CAP, SPREAD_FLOOR};
