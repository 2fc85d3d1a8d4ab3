//! Clustering of event embeddings and survival stratification of the
//! resulting subgroups.

mod contrast;
mod kmeans;
mod survival;

pub use contrast::{
    cluster_contrast, stratification_report, ClusterSummary, Contrast, EventOutcome, PairContrast,
    StratificationReport, SIGNIFICANCE, T_SENTINEL,
};
pub use kmeans::{elbow_select, elbow_sweep, kmeans, pca_2d, ClusterAssignment, DEFAULT_N_INIT, MAX_ITERATIONS};
pub use survival::{km_curve, survival_svg, SurvivalCurve};

/// Default K grid for elbow selection.
pub const DEFAULT_K_GRID: std::ops::RangeInclusive<usize> = 2..=12;
/// K used by report templates when no elbow sweep was run.
pub const TEMPLATE_K: usize = 6;
