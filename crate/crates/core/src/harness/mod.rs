//! Experiment runner: training and evaluation loops, per-epoch reports,
//! full-image versus masked comparison and checkpoints.

mod checkpoint;
mod config;
mod report;
mod train;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use report::{
    format_compare_csv, format_compare_table, format_delta_csv, format_epoch_table, parse_report, plot_report,
    read_report, render_svg, smoothed, EpochReport, ReportWriter, REPORT_HEADER,
};
pub use train::{
    epoch_checkpoint_name, evaluate, predict, prepare, resume_training, run_compare, run_training, score_file,
    train_epoch, CompareOutcome, PreparedRun, TrainOutcome, COMPARE_DELTA_FILE, COMPARE_FILE, COMPARE_TABLE_FILE,
    FINAL_CHECKPOINT, LR_LOG_FILE, REPORT_FILE, TABLE_FILE,
};
