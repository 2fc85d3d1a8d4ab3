//! Binary metrics, bootstrap estimates, linear probing and KNN evaluation of
//! frozen embeddings.

mod knn;
mod metrics;
mod probe;
mod table;

pub use knn::{knn_eval, knn_predict, vote, KnnConfig, KnnModel, KnnOutcome, KnnSweep, Metric, Weighting};
pub use metrics::{auprc, auroc, auroc_trapezoid, binary_metrics, bootstrap, BinaryMetrics, BootstrapEstimate};
pub use probe::{
    linear_probe, LogisticRegression, ProbeOutcome, Standardizer, DEFAULT_L2_GRID, GRAD_TOLERANCE,
    MAX_ITERATIONS,
};
pub use table::{EmbeddingRow, EmbeddingTable, EvalReport, MetricSummary, StdSource, TaskView};
