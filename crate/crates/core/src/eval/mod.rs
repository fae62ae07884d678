//! Per-class metrics, the None-aware confusion matrix and freeze-level
//! ablation.

mod ablation;
mod metrics;

pub use ablation::{ablation_csv, ablation_sweep, train_and_evaluate, AblationRun, AblationSetup};
pub use metrics::{
    average_precision, confusion, decide, evaluate, f1_score, mean_average_precision, precision_recall_f1, top1_accuracy,
    ClassMetrics, ConfusionMatrix, MeanMetrics, MetricsReport,
};
