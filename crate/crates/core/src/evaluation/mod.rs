mod grid;
mod metrics;

pub use grid::{run_grid, GridCell, GridInputs, GridMode, GridReport, GridRow, TaskArtifacts};
pub use metrics::{
    accuracy, evaluate_outputs, evaluate_task, macro_f1, nme, rmse, EyeIndices, MetricKind, MetricResult,
    DEFAULT_LEFT_EYE, DEFAULT_RIGHT_EYE,
};
