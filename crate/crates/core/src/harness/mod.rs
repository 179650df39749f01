//! Dataset ingestion, cross-validation, ablations and the δ sweep.

mod config;
mod dataset;
mod experiment;
mod synth;

pub use config::{CvConfig, DataConfig, HarnessConfig, ModelSection, PreprocessConfig};
pub use dataset::{load_dataset, make_folds, DatasetIndex, Entry, FoldSplit, Sample, SourceTag};
pub use experiment::{
    architecture_notes, compare_preprocessing, component_rows, csv_header, evaluate, fold_summary,
    orientation_rows, prepare, report_header, run_ablation, run_cv, sweep_delta, train_model,
    AblationLayout, AblationResult, AblationRow, AblationTable, CvRun, DeltaSweep, Prepared,
    PreprocessComparison, Trained, DEFAULT_DELTAS,
};
pub use synth::{bresenham, synth_dataset, synth_sample, synth_samples, SynthOptions};
