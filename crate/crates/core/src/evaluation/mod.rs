//! Metrics, k-means and the hash-based dataset-distribution study.

pub mod distribution;
pub mod kmeans;
pub mod metrics;

pub use distribution::{analyze_distribution, hash_features, DistributionReport};
pub use kmeans::{kmeans, KmeansInit, KmeansResult};
pub use metrics::{
    accuracy, argmax, confusion, f1, macro_ovr_auc, mean_iou, roc_auc, ConfusionMatrix, F1Scores, MetricsReport, OvrAuc,
    RocCurve,
};
