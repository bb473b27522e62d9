//! Benchmark harness: synthetic shift data, experiment grids, rank
//! statistics and report files.

mod grid;
mod report;
mod stats;
mod synth;

pub use grid::{
    run_experiment, CalibratorSpec, DataSource, DatasetSpec, EnsembleSpec, ExperimentPlan, FileDataset,
    FileSplits, MemberDraw, TrainingConfig,
};
pub use report::{
    emit_report, load_results, read_results_csv, scatter, write_results_csv, write_scatter_csv, ResultRow,
    ScatterRow, Scores, RESULTS_CSV, RESULTS_JSON, SCATTER_CSV,
};
pub use stats::{
    friedman_test, metric_matrix, nemenyi_q, nemenyi_test, rank_rows, FriedmanResult, MetricMatrix,
    NemenyiResult, SplitFilter,
};
pub use synth::{perturb_logits, synth_generate, SynthConfig};
