//! Event verification: confusion counts, CSI, evaluation reports, baselines
//! and ensembles.

mod metrics;
mod report;

pub use metrics::{binarize, csi, events_from_prediction, to_output_space, ConfusionCounts, EvalConfig};
pub use report::{
    ensemble_predict, evaluate, evaluate_model, evaluate_prediction_dir, predict_split, prediction_path,
    trivial_baselines, Baselines, EnsembleMode, EvalEcho, EvalReport, PredictionSource, RegionScore,
};
