//! Base learners and their prediction heads.
//!
//! Every model family can be fitted for three heads: the conditional mean,
//! a mean-absolute-deviation model of the mean's residuals, and a pair of
//! conditional quantiles.

pub mod forest;
pub mod mlp;
pub mod ridge;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;
use forest::{Forest, TreeConfig};
use mlp::{Mlp, MlpLoss};
use ridge::LinearModel;

/// Floor applied to MAD predictions so normalized scores stay finite.
pub const MAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ridge,
    Forest,
    Mlp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Ridge, ModelKind::Forest, ModelKind::Mlp];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ridge => "ridge",
            ModelKind::Forest => "forest",
            ModelKind::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ridge" => Ok(ModelKind::Ridge),
            "forest" | "rf" => Ok(ModelKind::Forest),
            "mlp" | "nn" => Ok(ModelKind::Mlp),
            _ => Err(Error::Config(format!("unknown model '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgeParams {
    pub lambda: f64,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub feature_frac: f64,
    /// Resample rows per tree. Not part of the search space.
    #[serde(default = "default_true")]
    pub bootstrap: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub hidden: usize,
    pub layers: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelHyperparams {
    Ridge(RidgeParams),
    Forest(ForestParams),
    Mlp(MlpParams),
}

impl ModelHyperparams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelHyperparams::Ridge(_) => ModelKind::Ridge,
            ModelHyperparams::Forest(_) => ModelKind::Forest,
            ModelHyperparams::Mlp(_) => ModelKind::Mlp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Mean,
    Mad,
    Quantile,
}

impl Head {
    fn name(self) -> &'static str {
        match self {
            Head::Mean => "mean",
            Head::Mad => "mad",
            Head::Quantile => "quantile",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Values(Vec<f64>),
    Pair { lower: Vec<f64>, upper: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Regressor {
    Linear(LinearModel),
    Forest(Forest),
    Mlp(Mlp),
}

impl Regressor {
    fn fit(hp: &ModelHyperparams, x: &Matrix, y: &[f64], seed: u64) -> Result<Regressor> {
        Ok(match hp {
            ModelHyperparams::Ridge(p) => Regressor::Linear(ridge::fit_ridge(x, y, p.lambda)?),
            ModelHyperparams::Forest(p) => Regressor::Forest(fit_forest(p, x, y, seed)),
            ModelHyperparams::Mlp(p) => Regressor::Mlp(Mlp::fit(
                x,
                y,
                MlpLoss::Squared,
                p.hidden,
                p.layers,
                p.learning_rate,
                p.epochs,
                p.weight_decay,
                seed,
            )?),
        })
    }

    fn predict(&self, x: &Matrix) -> Vec<f64> {
        match self {
            Regressor::Linear(m) => m.predict(x),
            Regressor::Forest(f) => f.predict(x),
            Regressor::Mlp(m) => m.predict(x),
        }
    }
}

fn fit_forest(p: &ForestParams, x: &Matrix, y: &[f64], seed: u64) -> Forest {
    let mtry = ((p.feature_frac * x.cols() as f64).round() as usize).clamp(1, x.cols());
    let config = TreeConfig {
        max_depth: p.max_depth,
        min_leaf: p.min_leaf,
        mtry,
    };
    Forest::fit(x, y, p.n_trees, config, p.bootstrap, seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum QuantileModel {
    Linear { lower: LinearModel, upper: LinearModel },
    Forest(Forest),
    Mlp(Mlp),
}

/// A fitted model with whichever heads have been trained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    hyperparams: ModelHyperparams,
    mean: Option<Regressor>,
    mad: Option<Regressor>,
    quantiles: Option<(QuantileModel, [f64; 2])>,
    dim: usize,
}

impl FittedModel {
    pub fn kind(&self) -> ModelKind {
        self.hyperparams.kind()
    }

    pub fn heads_available(&self) -> Vec<Head> {
        let mut heads = Vec::new();
        if self.mean.is_some() {
            heads.push(Head::Mean);
        }
        if self.mad.is_some() {
            heads.push(Head::Mad);
        }
        if self.quantiles.is_some() {
            heads.push(Head::Quantile);
        }
        heads
    }

    /// Quantile levels of the quantile head, if fitted.
    pub fn quantile_levels(&self) -> Option<[f64; 2]> {
        self.quantiles.as_ref().map(|q| q.1)
    }

    pub fn predict(&self, head: Head, x: &Matrix) -> Result<Prediction> {
        if x.cols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.cols(),
            });
        }
        if !x.is_finite() {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        let unavailable = || Error::UnavailableHead(head.name());
        match head {
            Head::Mean => Ok(Prediction::Values(self.mean.as_ref().ok_or_else(unavailable)?.predict(x))),
            Head::Mad => {
                let mut v = self.mad.as_ref().ok_or_else(unavailable)?.predict(x);
                v.iter_mut().for_each(|s| *s = s.max(MAD_FLOOR));
                Ok(Prediction::Values(v))
            }
            Head::Quantile => {
                let (model, levels) = self.quantiles.as_ref().ok_or_else(unavailable)?;
                let (mut lower, mut upper) = match model {
                    QuantileModel::Linear { lower, upper } => (lower.predict(x), upper.predict(x)),
                    QuantileModel::Forest(f) => x
                        .iter_rows()
                        .map(|r| {
                            let q = f.quantiles_row(r, levels);
                            (q[0], q[1])
                        })
                        .unzip(),
                    QuantileModel::Mlp(m) => {
                        let out = m.predict(x);
                        out.chunks(2).map(|c| (c[0], c[1])).unzip()
                    }
                };
                for (lo, hi) in lower.iter_mut().zip(upper.iter_mut()) {
                    if *lo > *hi {
                        std::mem::swap(lo, hi);
                    }
                }
                Ok(Prediction::Pair { lower, upper })
            }
        }
    }

    pub fn predict_values(&self, head: Head, x: &Matrix) -> Result<Vec<f64>> {
        match self.predict(head, x)? {
            Prediction::Values(v) => Ok(v),
            Prediction::Pair { .. } => Err(Error::UnavailableHead(head.name())),
        }
    }
}

fn check_xy(x: &Matrix, y: &[f64]) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            got: y.len(),
        });
    }
    if y.len() < 2 {
        return Err(Error::InsufficientData(format!("model fit needs at least 2 rows, got {}", y.len())));
    }
    Ok(())
}

/// Fits the conditional-mean head.
pub fn fit_mean(hp: &ModelHyperparams, x: &Matrix, y: &[f64], seed: u64) -> Result<FittedModel> {
    check_xy(x, y)?;
    Ok(FittedModel {
        hyperparams: *hp,
        mean: Some(Regressor::fit(hp, x, y, seed)?),
        mad: None,
        quantiles: None,
        dim: x.cols(),
    })
}

/// Adds a MAD head: a second model of the same family fitted to `|y - μ̂(x)|`.
pub fn fit_mad(model: &FittedModel, x: &Matrix, y: &[f64], seed: u64) -> Result<FittedModel> {
    check_xy(x, y)?;
    let mean = model.predict_values(Head::Mean, x)?;
    let residuals: Vec<f64> = mean.iter().zip(y).map(|(m, v)| (v - m).abs()).collect();
    let mut out = model.clone();
    out.mad = Some(Regressor::fit(&model.hyperparams, x, &residuals, seed::derive_seed(seed, 0x3AD))?);
    Ok(out)
}

/// Fits the quantile pair at levels `alpha/2` and `1 - alpha/2`.
pub fn fit_quantiles(hp: &ModelHyperparams, x: &Matrix, y: &[f64], alpha: f64, seed: u64) -> Result<FittedModel> {
    check_xy(x, y)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha {alpha} not in (0, 1)")));
    }
    let levels = [alpha / 2.0, 1.0 - alpha / 2.0];
    let model = match hp {
        ModelHyperparams::Ridge(p) => QuantileModel::Linear {
            lower: ridge::fit_linear_quantile(x, y, levels[0], p.lambda)?,
            upper: ridge::fit_linear_quantile(x, y, levels[1], p.lambda)?,
        },
        ModelHyperparams::Forest(p) => QuantileModel::Forest(fit_forest(p, x, y, seed)),
        ModelHyperparams::Mlp(p) => QuantileModel::Mlp(Mlp::fit(
            x,
            y,
            MlpLoss::Pinball(levels.to_vec()),
            p.hidden,
            p.layers,
            p.learning_rate,
            p.epochs,
            p.weight_decay,
            seed,
        )?),
    };
    Ok(FittedModel {
        hyperparams: *hp,
        mean: None,
        mad: None,
        quantiles: Some((model, levels)),
        dim: x.cols(),
    })
}
