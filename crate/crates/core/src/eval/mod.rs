//! Evaluation harness: group k-fold plans, regression metrics, the per-fold
//! pipeline, ablation and k-sweep runners, and a synthetic drift generator.

pub mod ablation;
pub mod folds;
pub mod metrics;
pub mod pipeline;
pub mod synth;

pub use ablation::{
    ladder_anchor_features, ladder_modalities, ladder_semantic, run_ablation, run_ablation_with, sweep_k, sweep_k_with,
    AblationReport, AblationRow, LadderStep,
};
pub use folds::{group_kfold, temporal_group_kfold, FoldPlan, RowRole, DEFAULT_FOLDS};
pub use metrics::{compute_metrics, mae, mape, r2, Metrics, MAPE_EPSILON};
pub use pipeline::{
    run_pipeline, run_pipeline_with, write_predictions_csv, FeatureGroup, FoldArtifacts, FoldMetrics, MetricReport,
    PipelineConfig, PipelineResult, PredictionRow,
};
pub use synth::{generate_synthetic, write_synthetic, SynthData, SynthSpec};

use crate::anchors::AnchorError;
use crate::clustering::ClusterError;
use crate::dataset::DatasetError;
use crate::gbdt::GbdtError;
use crate::modality::Modality;
use crate::semantic::SemanticError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{groups} distinct users cannot fill {folds} folds")]
    TooFewGroups { groups: usize, folds: usize },
    #[error("n_folds must be at least 2, got {0}")]
    TooFewFolds(usize),
    #[error("{y} targets but {yhat} predictions")]
    LengthMismatch { y: usize, yhat: usize },
    #[error("metric input is empty")]
    Empty,
    #[error("R² undefined: targets are constant but residuals are not zero")]
    UndefinedR2,
    #[error("fold plan covers {plan} rows but the dataset has {data}")]
    PlanMismatch { plan: usize, data: usize },
    #[error("fold {0} has no training or no test rows")]
    EmptyFold(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("modality {0} is enabled but missing from the dataset")]
    MissingModality(Modality),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Gbdt(#[from] GbdtError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;
