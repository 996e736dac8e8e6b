//! Search space, budget and their text configuration.

use serde::{Deserialize, Serialize};

use crate::conformal::{CalibrationChoice, CalibrationMethod, EstimatorKind};
use crate::error::{Error, Result};
use crate::gp::PipelineEncoding;
use crate::models::{ForestParams, MlpParams, ModelHyperparams, ModelKind, RidgeParams};
use crate::pipeline::PipelineSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RidgeRange {
    pub lambda: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestRange {
    pub n_trees: (usize, usize),
    pub max_depth: (usize, usize),
    pub min_leaf: (usize, usize),
    pub feature_frac: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpRange {
    pub hidden: (usize, usize),
    pub layers: (usize, usize),
    pub learning_rate: (f64, f64),
    pub epochs: (usize, usize),
    pub weight_decay: (f64, f64),
}

impl Default for RidgeRange {
    fn default() -> Self {
        RidgeRange { lambda: (1e-4, 1e3) }
    }
}

impl Default for ForestRange {
    fn default() -> Self {
        ForestRange {
            n_trees: (10, 500),
            max_depth: (2, 20),
            min_leaf: (1, 20),
            feature_frac: (0.05, 1.0),
        }
    }
}

impl Default for MlpRange {
    fn default() -> Self {
        MlpRange {
            hidden: (8, 128),
            layers: (1, 3),
            learning_rate: (1e-4, 1e-1),
            epochs: (50, 500),
            weight_decay: (1e-6, 1e-2),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelRanges {
    pub ridge: RidgeRange,
    pub forest: ForestRange,
    pub mlp: MlpRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationRanges {
    pub folds: (usize, usize),
    pub n_boot: (usize, usize),
}

impl Default for CalibrationRanges {
    fn default() -> Self {
        CalibrationRanges {
            folds: (2, 10),
            n_boot: (10, 50),
        }
    }
}

/// The pipelines a search may propose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub models: Vec<ModelKind>,
    pub estimators: Vec<EstimatorKind>,
    pub calibrations: Vec<CalibrationMethod>,
    pub ranges: ModelRanges,
    pub calibration: CalibrationRanges,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            models: ModelKind::ALL.to_vec(),
            estimators: EstimatorKind::ALL.to_vec(),
            calibrations: CalibrationMethod::ALL.to_vec(),
            ranges: ModelRanges::default(),
            calibration: CalibrationRanges::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchBudget {
    /// Random pipelines per model before the first acquisition.
    pub n_init: usize,
    pub n_iter: usize,
    /// Outer folds of the length objective.
    pub j_folds: usize,
    pub cost_aware: bool,
    pub seed: u64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget {
            n_init: 3,
            n_iter: 60,
            j_folds: 3,
            cost_aware: false,
            seed: 0,
        }
    }
}

impl SearchBudget {
    pub fn validate(&self) -> Result<()> {
        if self.n_init < 1 {
            return Err(Error::Config("n_init must be at least 1".into()));
        }
        if self.j_folds < 2 {
            return Err(Error::Config("j_folds must be at least 2".into()));
        }
        Ok(())
    }
}

/// Space plus budget, as read from a TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub space: SearchSpace,
    pub budget: SearchBudget,
}

impl SearchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SearchConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.space.validate()?;
        cfg.budget.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn unit(v: f64, (lo, hi): (f64, f64), log: bool) -> f64 {
    let (v, lo, hi) = if log { (v.ln(), lo.ln(), hi.ln()) } else { (v, lo, hi) };
    if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

fn from_unit(u: f64, (lo, hi): (f64, f64), log: bool) -> f64 {
    let u = u.clamp(0.0, 1.0);
    if log {
        (lo.ln() + u * (hi.ln() - lo.ln())).exp().clamp(lo, hi)
    } else {
        (lo + u * (hi - lo)).clamp(lo, hi)
    }
}

fn int_unit(v: usize, (lo, hi): (usize, usize)) -> f64 {
    unit(v as f64, (lo as f64, hi as f64), false)
}

fn int_from_unit(u: f64, (lo, hi): (usize, usize)) -> usize {
    (from_unit(u, (lo as f64, hi as f64), false).round() as usize).clamp(lo, hi)
}

impl SearchSpace {
    /// Estimator fixed to CQR.
    pub fn model_cal() -> Self {
        SearchSpace {
            estimators: vec![EstimatorKind::Cqr],
            ..Self::default()
        }
    }

    /// Model fixed to the MLP.
    pub fn estimator_cal() -> Self {
        SearchSpace {
            models: vec![ModelKind::Mlp],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonempty = |n: usize, what: &str| {
            if n == 0 {
                Err(Error::Config(format!("search space lists no {what}")))
            } else {
                Ok(())
            }
        };
        nonempty(self.models.len(), "models")?;
        nonempty(self.estimators.len(), "estimators")?;
        nonempty(self.calibrations.len(), "calibrations")?;
        let mut models = self.models.clone();
        models.sort();
        models.dedup();
        if models.len() != self.models.len() {
            return Err(Error::Config("duplicate model in search space".into()));
        }
        let r = &self.ranges;
        let real = |(lo, hi): (f64, f64), name: &str, min: f64, max: f64| {
            if !(lo.is_finite() && hi.is_finite() && lo > min && lo <= hi && hi <= max) {
                Err(Error::Config(format!("invalid range for {name}: [{lo}, {hi}]")))
            } else {
                Ok(())
            }
        };
        let int = |(lo, hi): (usize, usize), name: &str, min: usize| {
            if lo < min || lo > hi {
                Err(Error::Config(format!("invalid range for {name}: [{lo}, {hi}]")))
            } else {
                Ok(())
            }
        };
        real(r.ridge.lambda, "ridge.lambda", 0.0, f64::INFINITY)?;
        int(r.forest.n_trees, "forest.n_trees", 1)?;
        int(r.forest.max_depth, "forest.max_depth", 1)?;
        int(r.forest.min_leaf, "forest.min_leaf", 1)?;
        real(r.forest.feature_frac, "forest.feature_frac", 0.0, 1.0)?;
        int(r.mlp.hidden, "mlp.hidden", 1)?;
        int(r.mlp.layers, "mlp.layers", 1)?;
        real(r.mlp.learning_rate, "mlp.learning_rate", 0.0, f64::INFINITY)?;
        int(r.mlp.epochs, "mlp.epochs", 1)?;
        real(r.mlp.weight_decay, "mlp.weight_decay", 0.0, f64::INFINITY)?;
        int(self.calibration.folds, "calibration.folds", 2)?;
        int(self.calibration.n_boot, "calibration.n_boot", 10)?;
        Ok(())
    }

    pub fn model_dim(kind: ModelKind) -> usize {
        match kind {
            ModelKind::Ridge => 1,
            ModelKind::Forest => 4,
            ModelKind::Mlp => 5,
        }
    }

    pub fn model_dims(&self) -> Vec<usize> {
        self.models.iter().map(|&m| Self::model_dim(m)).collect()
    }

    pub fn slot_of(&self, kind: ModelKind) -> Option<usize> {
        self.models.iter().position(|&m| m == kind)
    }

    fn encode_model(&self, hp: &ModelHyperparams) -> Vec<f64> {
        let r = &self.ranges;
        match hp {
            ModelHyperparams::Ridge(p) => vec![unit(p.lambda, r.ridge.lambda, true)],
            ModelHyperparams::Forest(p) => vec![
                int_unit(p.n_trees, r.forest.n_trees),
                int_unit(p.max_depth, r.forest.max_depth),
                int_unit(p.min_leaf, r.forest.min_leaf),
                unit(p.feature_frac, r.forest.feature_frac, false),
            ],
            ModelHyperparams::Mlp(p) => vec![
                int_unit(p.hidden, r.mlp.hidden),
                int_unit(p.layers, r.mlp.layers),
                unit(p.learning_rate, r.mlp.learning_rate, true),
                int_unit(p.epochs, r.mlp.epochs),
                unit(p.weight_decay, r.mlp.weight_decay, true),
            ],
        }
    }

    fn decode_model(&self, kind: ModelKind, u: &[f64]) -> ModelHyperparams {
        let r = &self.ranges;
        match kind {
            ModelKind::Ridge => ModelHyperparams::Ridge(RidgeParams {
                lambda: from_unit(u[0], r.ridge.lambda, true),
            }),
            ModelKind::Forest => ModelHyperparams::Forest(ForestParams {
                n_trees: int_from_unit(u[0], r.forest.n_trees),
                max_depth: int_from_unit(u[1], r.forest.max_depth),
                min_leaf: int_from_unit(u[2], r.forest.min_leaf),
                feature_frac: from_unit(u[3], r.forest.feature_frac, false),
                bootstrap: true,
            }),
            ModelKind::Mlp => ModelHyperparams::Mlp(MlpParams {
                hidden: int_from_unit(u[0], r.mlp.hidden),
                layers: int_from_unit(u[1], r.mlp.layers),
                learning_rate: from_unit(u[2], r.mlp.learning_rate, true),
                epochs: int_from_unit(u[3], r.mlp.epochs),
                weight_decay: from_unit(u[4], r.mlp.weight_decay, true),
            }),
        }
    }

    fn calibration_level(&self, c: &CalibrationChoice) -> f64 {
        match *c {
            CalibrationChoice::Split => 0.0,
            CalibrationChoice::Kfold { folds } => int_unit(folds, self.calibration.folds),
            CalibrationChoice::Bootstrap { n_boot } => int_unit(n_boot, self.calibration.n_boot),
        }
    }

    fn decode_calibration(&self, method: CalibrationMethod, level: f64) -> CalibrationChoice {
        match method {
            CalibrationMethod::Split => CalibrationChoice::Split,
            CalibrationMethod::Kfold => CalibrationChoice::Kfold {
                folds: int_from_unit(level, self.calibration.folds),
            },
            CalibrationMethod::Bootstrap => CalibrationChoice::Bootstrap {
                n_boot: int_from_unit(level, self.calibration.n_boot),
            },
        }
    }

    pub fn encode(&self, spec: &PipelineSpec) -> Result<PipelineEncoding> {
        let slot = self
            .slot_of(spec.model.kind())
            .ok_or_else(|| Error::Search(format!("model {} not in search space", spec.model.kind().name())))?;
        let level = if spec.calibration.method() == CalibrationMethod::Split {
            0.0
        } else {
            self.calibration_level(&spec.calibration)
        };
        Ok(PipelineEncoding {
            model_slot: slot,
            model: self.encode_model(&spec.model),
            estimator: spec.estimator.index(),
            calibration: spec.calibration.method().index(),
            calibration_level: level,
        })
    }

    /// Maps an encoding to the nearest valid pipeline (integers rounded,
    /// categories constrained to the allowed sets).
    pub fn decode(&self, enc: &PipelineEncoding) -> Result<PipelineSpec> {
        let kind = *self
            .models
            .get(enc.model_slot)
            .ok_or_else(|| Error::Search(format!("model slot {} out of range", enc.model_slot)))?;
        if enc.model.len() != Self::model_dim(kind) {
            return Err(Error::DimensionMismatch {
                expected: Self::model_dim(kind),
                got: enc.model.len(),
            });
        }
        let estimator = EstimatorKind::ALL
            .get(enc.estimator)
            .copied()
            .filter(|e| self.estimators.contains(e))
            .ok_or_else(|| Error::Search(format!("estimator index {} not allowed", enc.estimator)))?;
        let method = CalibrationMethod::ALL
            .get(enc.calibration)
            .copied()
            .filter(|c| self.calibrations.contains(c))
            .ok_or_else(|| Error::Search(format!("calibration index {} not allowed", enc.calibration)))?;
        Ok(PipelineSpec {
            model: self.decode_model(kind, &enc.model),
            estimator,
            calibration: self.decode_calibration(method, enc.calibration_level),
        })
    }

    /// Whether `spec` lies inside this space, ranges included.
    pub fn contains(&self, spec: &PipelineSpec) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo * (1.0 - 1e-12) && v <= hi * (1.0 + 1e-12);
        let iwithin = |v: usize, (lo, hi): (usize, usize)| (lo..=hi).contains(&v);
        let r = &self.ranges;
        let model_ok = self.models.contains(&spec.model.kind())
            && match &spec.model {
                ModelHyperparams::Ridge(p) => within(p.lambda, r.ridge.lambda),
                ModelHyperparams::Forest(p) => {
                    iwithin(p.n_trees, r.forest.n_trees)
                        && iwithin(p.max_depth, r.forest.max_depth)
                        && iwithin(p.min_leaf, r.forest.min_leaf)
                        && within(p.feature_frac, r.forest.feature_frac)
                }
                ModelHyperparams::Mlp(p) => {
                    iwithin(p.hidden, r.mlp.hidden)
                        && iwithin(p.layers, r.mlp.layers)
                        && within(p.learning_rate, r.mlp.learning_rate)
                        && iwithin(p.epochs, r.mlp.epochs)
                        && within(p.weight_decay, r.mlp.weight_decay)
                }
            };
        let cal_ok = self.calibrations.contains(&spec.calibration.method())
            && match spec.calibration {
                CalibrationChoice::Split => true,
                CalibrationChoice::Kfold { folds } => iwithin(folds, self.calibration.folds),
                CalibrationChoice::Bootstrap { n_boot } => iwithin(n_boot, self.calibration.n_boot),
            };
        model_ok && cal_ok && self.estimators.contains(&spec.estimator)
    }
}
