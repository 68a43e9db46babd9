//! Evaluation metrics. (implementation follows)
pub struct MetricReport;
