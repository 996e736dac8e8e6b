use std::fmt;

use serde::{Deserialize, Serialize};

use crate::conformal::{CalibrationChoice, EstimatorKind};
use crate::models::ModelHyperparams;

/// A complete conformal pipeline: model with hyperparameters, nonconformity
/// estimator and calibration method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub model: ModelHyperparams,
    pub estimator: EstimatorKind,
    pub calibration: CalibrationChoice,
}

impl fmt::Display for PipelineSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use crate::models::ModelHyperparams as H;
        match &self.model {
            H::Ridge(p) => write!(f, "ridge(lambda={:.3e})", p.lambda)?,
            H::Forest(p) => write!(
                f,
                "forest(trees={}, depth={}, leaf={}, frac={:.2})",
                p.n_trees, p.max_depth, p.min_leaf, p.feature_frac
            )?,
            H::Mlp(p) => write!(
                f,
                "mlp(hidden={}, layers={}, lr={:.2e}, epochs={}, wd={:.2e})",
                p.hidden, p.layers, p.learning_rate, p.epochs, p.weight_decay
            )?,
        }
        write!(f, " + {} + {}", self.estimator.name(), self.calibration)
    }
}
