//! Optimization, training, evaluation and the experiment matrix.

mod adam;
mod matrix;
mod train;

pub use adam::{Adam, AdamConfig, ParamGrad};
pub use matrix::{
    matrix_specs, run_cells, CellCallback, run_matrix, CellMetrics, CellResult, ResultsTable, SummaryRow, CSV_COLUMNS, MATRIX_CELLS,
};
pub use train::{evaluate, evaluate_checkpoint, predict_pair, train, EpochRecord, ExperimentSpec, Progress, TrainConfig, TrainHistory, TrainOutcome};

#[cfg(test)]
mod tests;
