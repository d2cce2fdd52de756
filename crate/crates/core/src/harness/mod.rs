//! Experiment harness: data in, labeling rounds, records out.

pub mod config;
pub mod data;
pub mod experiment;
pub mod records;

pub use config::{AnnotatorSpec, DeltaMode, ExperimentConfig, Strategy};
pub use data::{load_csv, split, synthetic, RawDataset, SyntheticSpec};
pub use experiment::{
    build_crowd, fit_full_pool, load_data, prepare_split, rmse, run_experiment, run_on, run_repetition,
    ExperimentOutput, FitSummary, LabelScale, PreparedSplit, RepetitionSummary,
};
pub use records::{emit_records, format_float, write_records, RecordFormat, RoundRecord};
