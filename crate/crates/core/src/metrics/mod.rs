//! Evaluation statistics: ROC AUC with DeLong confidence intervals, the
//! multi-metric classification report, Harrell's concordance index, the
//! two-sample log-rank test, and Kaplan-Meier curves.

pub mod classification;
pub mod special;
pub mod survival;

pub use classification::{
    average_precision, classification_report, delong_ci, delong_components, roc_auc,
    roc_auc_micro, roc_points, ClassificationReport,
};
pub use survival::{
    c_index, km_curve, log_rank, stratify_by_median, survival_report, KmCurve, SurvivalReport,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("both classes must be present to compute a ROC statistic")]
    SingleClass,
    #[error("DeLong requires at least two members per class, got {positives} / {negatives}")]
    DegenerateClassSizes { positives: usize, negatives: usize },
    #[error("probability row {row} sums to {sum}, expected 1")]
    InvalidProbabilities { row: usize, sum: f64 },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("no comparable pairs for the concordance index")]
    NoComparablePairs,
    #[error("log-rank requires both groups to be non-empty")]
    EmptyGroup,
    #[error("log-rank requires at least one event")]
    NoEvents,
    #[error("at least {0} samples required")]
    TooFewSamples(usize),
    #[error("degenerate stratification: a risk group would be empty")]
    DegenerateStratification,
}
