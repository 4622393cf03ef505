//! Correlation metrics, the five-fold few-shot split protocol, per-fold
//! evaluation and diagnostic tables.

pub mod metrics;
mod protocol;
mod report;
mod split;

pub use metrics::{fractional_ranks, plcc, srcc};
pub use protocol::{run_protocol, FoldResult, ProtocolReport};
pub use report::{
    analyze, evaluate, score_records, DecileRow, Diagnostics, DiagnosticRow, HistogramBin,
    write_rows, MetricReport, SampleRow, HISTOGRAM_BINS,
};
pub use split::{make_folds, Fold, SplitPlan, FOLD_COUNT};
