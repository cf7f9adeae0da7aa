//! Run configuration, the command implementations behind the
//! `latentvision` binary, plots and comparison tables.

mod commands;
mod plot;
mod spec;
mod table;

pub use commands::{
    cmd_compress, cmd_eval, cmd_latents, cmd_report, cmd_train, codec_file_name, CompressReport, CompressRow,
    DataSource, EvalSource, TrainOutcome, CLASSIFIER_NAME, METRICS_NAME,
};
pub use plot::{line_plot, plot_run};
pub use spec::{
    apply_overrides, ClassifierSpec, CodecSpec, CommandKind, DataSpec, RunSpec, TrainSpec, DATA_ENV, RESOLVED_NAME,
};
pub use table::{collect_runs, median, Cell, ReportTable, SUMMARY_NAME};

use crate::Error;

/// Process exit code for an error: 2 for usage and configuration
/// problems, 3 for failures during the run.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_usage() {
        2
    } else {
        3
    }
}
