//! Training, calibrated inference and GZSL evaluation.

mod config;
mod export;
mod gradcheck;
mod metrics;
mod model;
mod train;

pub use config::{SynthSource, TrainConfig};
pub use export::{decode_features, encode_features, read_features, write_features, FeatureMatrix, FEATURE_MAGIC, FEATURE_VERSION};
pub use gradcheck::{run_gradcheck, GradcheckEntry, GradcheckOptions, GradcheckReport, GRADCHECK_THRESHOLD};
pub use metrics::{
    calibrated_predict, calibrated_predictions, evaluate_predictions, gamma_grid, harmonic_mean, select_gamma, sweep_gamma,
    ClassCounts, EvalReport, GammaSweep, GroupMetrics, OverallMetrics, SweepPoint,
};
pub use model::{
    encode_batch, init_params, overall_loss, prepare_bundle, score_and_features, score_batch, BatchFeatures, Dims, LossBreakdown,
    LossTerms, ObjectiveContext, PreparedSample, Weights, TERM_NAMES,
};
pub use train::{
    run_seeds, synthesize_features, BestState, Checkpoint, EpochRecord, MeanStd, SeedRun, SeedSummary, TestOutcome, TrainSession,
};

use thiserror::Error;

use crate::data::DataError;
use crate::fusion::FusionError;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence { epoch: usize, batch: usize, detail: String },
    #[error("validation split has no unseen-category instances; gamma selection needs them")]
    NoValidationUnseen,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("checkpoint config hash {found} does not match {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
}

impl EngineError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, EngineError::Numerics(_) | EngineError::Divergence { .. })
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        EngineError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
