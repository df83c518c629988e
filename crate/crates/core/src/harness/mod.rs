//! Experiment harness behind the `segdenoise` binary.
//!
//! Files of one experiment live under `<output root>/<name>/`:
//!
//! ```text
//! data/{clean,labels}/<index>.png, data/{train,test}.manifest
//! checkpoints/s0.sdbn, checkpoints/<variant>-<stage>.sdbn
//! metrics/train-<variant>-x<n>.csv, metrics/eval-<variant>-x<n>-<noise>.csv
//! dump/<variant>-x<n>/<split>/<index>_u<unit>_<noisy|denoised|seg>.png
//! ```
//!
//! The output root is `output_dir` from the config unless
//! `SEGDENOISE_OUTPUT_ROOT` is set.

mod commands;
mod config;
mod report;

pub use commands::{
    cmd_eval, cmd_generate, cmd_train, experiment_id, model_tag, parse_noise, EvalArgs, GenerateArgs, RunLayout,
    SplitChoice, TrainArgs,
};
pub use config::{DatasetSection, ExperimentConfig, ModelSection, TrainingSection, OUTPUT_ROOT_ENV};
pub use report::{
    cmd_report, collect, line_plot_svg, sigma_of, sigma_series, table_csv, table_text, unit_series, ReportArgs,
    ReportFiles, Summary, METRICS,
};
