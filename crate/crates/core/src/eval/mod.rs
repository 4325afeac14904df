//! Metrics, cross-validation, embedding export and gradient checking.

mod cv;
mod export;
mod gradcheck;
mod metrics;

pub use cv::{
    cv_split, early_stopped, evaluate_variant, read_metrics_csv, run_cv, run_variants, summarize, train_on_split,
    write_metrics_csv, CvSettings, CvSplit, HistoryRecord, MetricRecord, MetricReport, RunReport,
};
pub use export::{export_embeddings, pca_2d};
pub use gradcheck::{
    gradcheck_fn, gradcheck_model, gradcheck_model_sampled, objective_name, objectives_of, relative_error, GradCheckReport, GRADCHECK_STEP,
    GRADCHECK_TOLERANCE,
};
pub use metrics::{
    argmax, decode, f1_classes, f1_multilabel, f1_score, r2_score, score, F1Average, Predictions, MULTILABEL_THRESHOLD,
};
