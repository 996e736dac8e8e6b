//! Nonconformity scores, the finite-sample conformal quantile, and interval
//! construction.
//!
//! Every estimator yields intervals of the form `{y : r(x, y) <= q}`:
//!
//! | estimator          | score `r(x, y)`                  | interval                  |
//! |--------------------|----------------------------------|---------------------------|
//! | `mean_residual`    | `|μ̂(x) - y|`                     | `[μ̂ - q, μ̂ + q]`          |
//! | `locally_weighted` | `|μ̂(x) - y| / σ̂(x)`              | `[μ̂ - qσ̂, μ̂ + qσ̂]`        |
//! | `cqr`              | `max(q̂_lo(x) - y, y - q̂_hi(x))`  | `[q̂_lo - q, q̂_hi + q]`    |

mod predictor;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::models::{self, Head, ModelHyperparams, Prediction};

pub use predictor::IntervalPredictor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    MeanResidual,
    LocallyWeighted,
    Cqr,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::MeanResidual, EstimatorKind::LocallyWeighted, EstimatorKind::Cqr];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::MeanResidual => "mean_residual",
            EstimatorKind::LocallyWeighted => "locally_weighted",
            EstimatorKind::Cqr => "cqr",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Model heads this estimator needs.
    pub fn required_heads(self) -> &'static [Head] {
        match self {
            EstimatorKind::MeanResidual => &[Head::Mean],
            EstimatorKind::LocallyWeighted => &[Head::Mean, Head::Mad],
            EstimatorKind::Cqr => &[Head::Quantile],
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_residual" | "split" | "residual" => Ok(EstimatorKind::MeanResidual),
            "locally_weighted" | "local" => Ok(EstimatorKind::LocallyWeighted),
            "cqr" => Ok(EstimatorKind::Cqr),
            _ => Err(Error::Config(format!("unknown estimator '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    Split,
    Kfold,
    Bootstrap,
}

impl CalibrationMethod {
    pub const ALL: [CalibrationMethod; 3] = [CalibrationMethod::Split, CalibrationMethod::Kfold, CalibrationMethod::Bootstrap];

    pub fn name(self) -> &'static str {
        match self {
            CalibrationMethod::Split => "split",
            CalibrationMethod::Kfold => "kfold",
            CalibrationMethod::Bootstrap => "bootstrap",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for CalibrationMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(CalibrationMethod::Split),
            "kfold" | "cross" => Ok(CalibrationMethod::Kfold),
            "bootstrap" => Ok(CalibrationMethod::Bootstrap),
            _ => Err(Error::Config(format!("unknown calibration method '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum CalibrationChoice {
    Split,
    Kfold { folds: usize },
    Bootstrap { n_boot: usize },
}

impl CalibrationChoice {
    pub fn method(&self) -> CalibrationMethod {
        match self {
            CalibrationChoice::Split => CalibrationMethod::Split,
            CalibrationChoice::Kfold { .. } => CalibrationMethod::Kfold,
            CalibrationChoice::Bootstrap { .. } => CalibrationMethod::Bootstrap,
        }
    }
}

impl fmt::Display for CalibrationChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalibrationChoice::Split => write!(f, "split"),
            CalibrationChoice::Kfold { folds } => write!(f, "kfold({folds})"),
            CalibrationChoice::Bootstrap { n_boot } => write!(f, "bootstrap({n_boot})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub lower: f64,
    pub upper: f64,
    /// Set when the interval collapsed (lower bound crossed upper bound);
    /// `lower == upper` is then the crossing midpoint.
    pub empty: bool,
}

impl PredictionInterval {
    pub fn new(lower: f64, upper: f64) -> Self {
        if upper < lower {
            let mid = 0.5 * (lower + upper);
            PredictionInterval {
                lower: mid,
                upper: mid,
                empty: true,
            }
        } else {
            PredictionInterval {
                lower,
                upper,
                empty: false,
            }
        }
    }

    pub fn infinite() -> Self {
        PredictionInterval {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            empty: false,
        }
    }

    pub fn length(&self) -> f64 {
        if self.empty {
            0.0
        } else {
            self.upper - self.lower
        }
    }

    pub fn is_finite(&self) -> bool {
        self.lower.is_finite() && self.upper.is_finite()
    }

    pub fn contains(&self, y: f64) -> bool {
        !self.empty && self.lower <= y && y <= self.upper
    }
}

/// Model outputs at one input, shaped by the estimator that uses them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadValues {
    Mean(f64),
    Weighted { mean: f64, mad: f64 },
    Quantiles { lower: f64, upper: f64 },
}

impl HeadValues {
    pub fn estimator(&self) -> EstimatorKind {
        match self {
            HeadValues::Mean(_) => EstimatorKind::MeanResidual,
            HeadValues::Weighted { .. } => EstimatorKind::LocallyWeighted,
            HeadValues::Quantiles { .. } => EstimatorKind::Cqr,
        }
    }

    /// Component-wise mean of same-shaped head values.
    pub fn average(values: impl Iterator<Item = HeadValues>) -> Option<HeadValues> {
        let mut n = 0usize;
        let mut acc: Option<HeadValues> = None;
        for v in values {
            n += 1;
            acc = Some(match (acc, v) {
                (None, v) => v,
                (Some(HeadValues::Mean(a)), HeadValues::Mean(b)) => HeadValues::Mean(a + b),
                (Some(HeadValues::Weighted { mean: a, mad: s }), HeadValues::Weighted { mean: b, mad: t }) => {
                    HeadValues::Weighted { mean: a + b, mad: s + t }
                }
                (Some(HeadValues::Quantiles { lower: a, upper: s }), HeadValues::Quantiles { lower: b, upper: t }) => {
                    HeadValues::Quantiles { lower: a + b, upper: s + t }
                }
                _ => return None,
            });
        }
        let k = n as f64;
        acc.map(|a| match a {
            HeadValues::Mean(m) => HeadValues::Mean(m / k),
            HeadValues::Weighted { mean, mad } => HeadValues::Weighted {
                mean: mean / k,
                mad: mad / k,
            },
            HeadValues::Quantiles { lower, upper } => HeadValues::Quantiles {
                lower: lower / k,
                upper: upper / k,
            },
        })
    }
}

/// Nonconformity score of label `y` under `heads`.
pub fn score(heads: &HeadValues, y: f64) -> f64 {
    match *heads {
        HeadValues::Mean(mean) => (mean - y).abs(),
        HeadValues::Weighted { mean, mad } => (mean - y).abs() / mad,
        HeadValues::Quantiles { lower, upper } => (lower - y).max(y - upper),
    }
}

/// The set `{y : score(heads, y) <= q}`.
pub fn invert_score(heads: &HeadValues, q: f64) -> PredictionInterval {
    if !q.is_finite() {
        return PredictionInterval::infinite();
    }
    match *heads {
        HeadValues::Mean(mean) => PredictionInterval::new(mean - q, mean + q),
        HeadValues::Weighted { mean, mad } => PredictionInterval::new(mean - q * mad, mean + q * mad),
        HeadValues::Quantiles { lower, upper } => PredictionInterval::new(lower - q, upper + q),
    }
}

/// `floor((n + 1) * alpha)`, the rank from the top used by every calibration method.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    (((n + 1) as f64 * alpha) + 1e-9).floor() as usize
}

/// The `floor((n + 1) alpha)`-th largest of the sorted `scores`.
///
/// `Ok(None)` means the rank is zero: too few scores for this `alpha`, and
/// the caller must report an unbounded interval.
pub fn conformal_quantile(sorted_scores: &[f64], alpha: f64) -> Result<Option<f64>> {
    check_alpha(alpha)?;
    let n = sorted_scores.len();
    if n == 0 {
        return Err(Error::InsufficientData("conformal_quantile needs at least one score".into()));
    }
    let k = conformal_rank(n, alpha).min(n);
    Ok((k > 0).then(|| sorted_scores[n - k]))
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("alpha {alpha} not in (0, 1)")))
    }
}

/// A fitted model that answers the heads one estimator needs.
pub trait HeadModel: Send + Sync {
    fn predict_heads(&self, x: &Matrix) -> Result<Vec<HeadValues>>;
}

/// Something that can be trained into a [`HeadModel`].
pub trait Learner: Send + Sync {
    fn fit_heads(
        &self,
        estimator: EstimatorKind,
        x: &Matrix,
        y: &[f64],
        alpha: f64,
        seed: u64,
    ) -> Result<Arc<dyn HeadModel>>;
}

struct EstimatorModel {
    estimator: EstimatorKind,
    model: models::FittedModel,
}

impl HeadModel for EstimatorModel {
    fn predict_heads(&self, x: &Matrix) -> Result<Vec<HeadValues>> {
        Ok(match self.estimator {
            EstimatorKind::MeanResidual => self
                .model
                .predict_values(Head::Mean, x)?
                .into_iter()
                .map(HeadValues::Mean)
                .collect(),
            EstimatorKind::LocallyWeighted => {
                let mean = self.model.predict_values(Head::Mean, x)?;
                let mad = self.model.predict_values(Head::Mad, x)?;
                mean.into_iter()
                    .zip(mad)
                    .map(|(mean, mad)| HeadValues::Weighted { mean, mad })
                    .collect()
            }
            EstimatorKind::Cqr => match self.model.predict(Head::Quantile, x)? {
                Prediction::Pair { lower, upper } => lower
                    .into_iter()
                    .zip(upper)
                    .map(|(lower, upper)| HeadValues::Quantiles { lower, upper })
                    .collect(),
                Prediction::Values(_) => return Err(Error::UnavailableHead("quantile")),
            },
        })
    }
}

impl Learner for ModelHyperparams {
    fn fit_heads(
        &self,
        estimator: EstimatorKind,
        x: &Matrix,
        y: &[f64],
        alpha: f64,
        seed: u64,
    ) -> Result<Arc<dyn HeadModel>> {
        let model = match estimator {
            EstimatorKind::MeanResidual => models::fit_mean(self, x, y, seed)?,
            EstimatorKind::LocallyWeighted => {
                let mean = models::fit_mean(self, x, y, seed)?;
                models::fit_mad(&mean, x, y, seed)?
            }
            EstimatorKind::Cqr => models::fit_quantiles(self, x, y, alpha, seed)?,
        };
        Ok(Arc::new(EstimatorModel { estimator, model }))
    }
}
