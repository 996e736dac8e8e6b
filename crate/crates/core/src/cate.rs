//! Intervals for the treatment effect `Y(1) - Y(0)` from per-arm intervals.

use serde::{Deserialize, Serialize};

use crate::conformal::{check_alpha, IntervalPredictor, PredictionInterval};
use crate::dataset::{make_splits, Dataset};
use crate::error::{Error, Result};
use crate::optimizer::{run_autocp, SearchConfig, MIN_TRAIN_POINTS};
use crate::pipeline::PipelineSpec;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CateInterval {
    pub lower: f64,
    pub upper: f64,
    pub component_alphas: (f64, f64),
    /// Set when either component was empty or infinite; the bounds are then
    /// `(-inf, inf)`.
    pub flagged: bool,
}

impl CateInterval {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, effect: f64) -> bool {
        self.lower <= effect && effect <= self.upper
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

/// `[a1 - b0, b1 - a0]` for `interval0 = [a0, b0]`, `interval1 = [a1, b1]`.
pub fn combine(interval0: &PredictionInterval, interval1: &PredictionInterval, alphas: (f64, f64)) -> CateInterval {
    let usable = |iv: &PredictionInterval| !iv.empty && iv.is_finite();
    if !usable(interval0) || !usable(interval1) {
        return CateInterval {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            component_alphas: alphas,
            flagged: true,
        };
    }
    CateInterval {
        lower: interval1.lower - interval0.upper,
        upper: interval1.upper - interval0.lower,
        component_alphas: alphas,
        flagged: false,
    }
}

/// How each arm's predictor is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmPipeline {
    Search(SearchConfig),
    Fixed(PipelineSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateConfig {
    pub arm: ArmPipeline,
    pub treatment: String,
    /// Ground-truth potential outcomes, when known.
    pub counterfactuals: Option<(String, String)>,
    pub train_frac: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateReport {
    pub alpha_total: f64,
    pub arm_alpha: f64,
    /// Union-bound guarantee `1 - a0 - a1`.
    pub guaranteed_level: f64,
    /// `(1 - a0)(1 - a1)`, valid only if the two arms' errors are independent.
    pub independent_level: f64,
    pub test_indices: Vec<usize>,
    pub intervals: Vec<CateInterval>,
    pub arm_specs: (PipelineSpec, PipelineSpec),
    /// Coverage of the observed outcome by its own arm's interval, per arm.
    pub response_coverage: (f64, f64),
    pub cate_coverage: Option<f64>,
    pub mean_length: f64,
}

fn fit_arm(arm: &ArmPipeline, data: &Dataset, alpha: f64, seed: u64) -> Result<(PipelineSpec, IntervalPredictor)> {
    match arm {
        ArmPipeline::Fixed(spec) => Ok((*spec, IntervalPredictor::fit(spec, &data.features, &data.labels, alpha, seed)?)),
        ArmPipeline::Search(cfg) => {
            let mut cfg = cfg.clone();
            cfg.budget.seed = seed;
            let out = run_autocp(data, alpha, &cfg)?;
            Ok((out.best().spec, out.predictor))
        }
    }
}

/// Splits rows into train/test, fits one predictor per arm at
/// `alpha_total / 2` on that arm's training rows, and combines both arms'
/// intervals at every test point.
pub fn cate_pipeline(data: &Dataset, alpha_total: f64, config: &CateConfig) -> Result<CateReport> {
    check_alpha(alpha_total)?;
    let t = data
        .side_columns
        .get(&config.treatment)
        .ok_or_else(|| Error::InvalidInput(format!("treatment column '{}' not found", config.treatment)))?;
    if let Some((i, v)) = t.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput(format!(
            "treatment column '{}' must be binary 0/1; row {} has {v}",
            config.treatment,
            i + 1
        )));
    }
    let truth = match &config.counterfactuals {
        Some((c0, c1)) => {
            let get = |c: &String| {
                data.side_columns
                    .get(c)
                    .ok_or_else(|| Error::InvalidInput(format!("counterfactual column '{c}' not found")))
            };
            Some((get(c0)?, get(c1)?))
        }
        None => None,
    };
    let plan = make_splits(data.len(), 1, config.train_frac, derive_seed(config.seed, 0))?.remove(0);
    let arm_rows = |arm: f64| -> Vec<usize> { plan.train_indices.iter().copied().filter(|&i| t[i] == arm).collect() };
    let (rows0, rows1) = (arm_rows(0.0), arm_rows(1.0));
    for (arm, rows) in [(0, &rows0), (1, &rows1)] {
        if rows.len() < MIN_TRAIN_POINTS {
            return Err(Error::InsufficientData(format!(
                "arm {arm} has {} training rows, need at least {MIN_TRAIN_POINTS}",
                rows.len()
            )));
        }
    }
    let arm_alpha = alpha_total / 2.0;
    let (spec0, p0) = fit_arm(&config.arm, &data.subset(&rows0), arm_alpha, derive_seed(config.seed, 1))?;
    let (spec1, p1) = fit_arm(&config.arm, &data.subset(&rows1), arm_alpha, derive_seed(config.seed, 2))?;
    let test = &plan.test_indices;
    let xt = data.features.select_rows(test);
    let i0 = p0.predict_intervals(&xt)?;
    let i1 = p1.predict_intervals(&xt)?;
    let intervals: Vec<CateInterval> = i0.iter().zip(&i1).map(|(a, b)| combine(a, b, (arm_alpha, arm_alpha))).collect();

    let arm_coverage = |arm: f64, ivs: &[PredictionInterval]| {
        let hits: Vec<bool> = test
            .iter()
            .zip(ivs)
            .filter(|(&i, _)| t[i] == arm)
            .map(|(&i, iv)| iv.contains(data.labels[i]))
            .collect();
        if hits.is_empty() {
            f64::NAN
        } else {
            hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
        }
    };
    let cate_coverage = truth.map(|(y0, y1)| {
        test.iter()
            .zip(&intervals)
            .filter(|(&i, c)| c.contains(y1[i] - y0[i]))
            .count() as f64
            / test.len() as f64
    });
    let finite: Vec<f64> = intervals.iter().filter(|c| !c.flagged).map(CateInterval::length).collect();
    Ok(CateReport {
        alpha_total,
        arm_alpha,
        guaranteed_level: 1.0 - 2.0 * arm_alpha,
        independent_level: (1.0 - arm_alpha).powi(2),
        test_indices: test.clone(),
        arm_specs: (spec0, spec1),
        response_coverage: (arm_coverage(0.0, &i0), arm_coverage(1.0, &i1)),
        cate_coverage,
        mean_length: if finite.len() == intervals.len() {
            finite.iter().sum::<f64>() / finite.len().max(1) as f64
        } else {
            f64::INFINITY
        },
        intervals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{CalibrationChoice, EstimatorKind};
    use crate::models::{ModelHyperparams, RidgeParams};
    use proptest::prelude::*;

    fn iv(a: f64, b: f64) -> PredictionInterval {
        PredictionInterval::new(a, b)
    }

    #[test]
    fn combine_examples() {
        let c = combine(&iv(0.0, 1.0), &iv(2.0, 3.0), (0.05, 0.05));
        assert_eq!((c.lower, c.upper, c.length()), (1.0, 3.0, 2.0));
        let c = combine(&iv(1.5, 1.5), &iv(4.0, 4.0), (0.05, 0.05));
        assert_eq!((c.lower, c.upper, c.length()), (2.5, 2.5, 0.0));
        let c = combine(&iv(-0.7, 0.7), &iv(-0.7, 0.7), (0.05, 0.05));
        assert_eq!((c.lower, c.upper), (-1.4, 1.4));
        assert!(combine(&PredictionInterval::infinite(), &iv(0.0, 1.0), (0.1, 0.1)).flagged);
        assert!(combine(&iv(0.0, 1.0), &iv(2.0, 1.0), (0.1, 0.1)).flagged);
    }

    fn bounds() -> impl Strategy<Value = (f64, f64)> {
        (-50.0f64..50.0, 0.0f64..20.0).prop_map(|(a, w)| (a, a + w))
    }

    proptest! {
        #[test]
        fn length_adds_and_order_reflects((a0, b0) in bounds(), (a1, b1) in bounds()) {
            let c = combine(&iv(a0, b0), &iv(a1, b1), (0.05, 0.05));
            prop_assert_eq!(c.length(), (b1 - a0) - (a1 - b0));
            prop_assert!(((b1 - a1) + (b0 - a0) - c.length()).abs() <= 1e-12 * (1.0 + c.length()));
            let r = combine(&iv(a1, b1), &iv(a0, b0), (0.05, 0.05));
            prop_assert_eq!(r.upper, -c.lower);
            prop_assert_eq!(r.lower, -c.upper);
        }

        #[test]
        fn coverage_composes((a0, b0) in bounds(), (a1, b1) in bounds(), s in 0.0f64..=1.0, u in 0.0f64..=1.0) {
            let y0 = a0 + s * (b0 - a0);
            let y1 = a1 + u * (b1 - a1);
            prop_assert!(combine(&iv(a0, b0), &iv(a1, b1), (0.05, 0.05)).contains(y1 - y0));
        }
    }

    #[test]
    fn endpoints_exhaustively_imply_effect_coverage() {
        let grid: Vec<f64> = (0..=8).map(|i| -2.0 + 0.5 * i as f64).collect();
        for &a0 in &grid {
            for &b0 in grid.iter().filter(|&&b| b >= a0) {
                for &a1 in &grid {
                    for &b1 in grid.iter().filter(|&&b| b >= a1) {
                        let c = combine(&iv(a0, b0), &iv(a1, b1), (0.05, 0.05));
                        for y0 in [a0, b0, 0.5 * (a0 + b0)] {
                            for y1 in [a1, b1, 0.5 * (a1 + b1)] {
                                assert!(c.contains(y1 - y0));
                            }
                        }
                    }
                }
            }
        }
    }

    fn fixed() -> ArmPipeline {
        ArmPipeline::Fixed(PipelineSpec {
            model: ModelHyperparams::Ridge(RidgeParams { lambda: 1e-2 }),
            estimator: EstimatorKind::MeanResidual,
            calibration: CalibrationChoice::Split,
        })
    }

    fn config(seed: u64) -> CateConfig {
        CateConfig {
            arm: fixed(),
            treatment: "t".into(),
            counterfactuals: Some(("y0".into(), "y1".into())),
            train_frac: 0.8,
            seed,
        }
    }

    #[test]
    fn pipeline_reports_both_levels_and_coverage() {
        let data = crate::synthetic::two_arm(600, 3, 1.0, 3);
        let r = cate_pipeline(&data, 0.1, &config(3)).unwrap();
        assert_eq!(r.arm_alpha, 0.05);
        assert!((r.guaranteed_level - 0.9).abs() < 1e-12);
        assert!((r.independent_level - 0.9025).abs() < 1e-12);
        assert_eq!(r.intervals.len(), 120);
        assert!(r.cate_coverage.unwrap() > 0.8);
        assert!(r.intervals.iter().all(|c| c.lower <= c.upper));
    }

    #[test]
    fn zero_effect_is_centered() {
        let mut centers = 0.0;
        let mut lengths = 0.0;
        for seed in 0..20 {
            let data = crate::synthetic::two_arm(400, 2, 0.0, seed);
            let r = cate_pipeline(&data, 0.1, &config(seed)).unwrap();
            centers += r.intervals.iter().map(CateInterval::center).sum::<f64>() / r.intervals.len() as f64;
            lengths += r.mean_length;
        }
        assert!(centers.abs() < 0.1 * lengths, "center {centers} length {lengths}");
    }

    #[test]
    fn rejects_bad_treatment() {
        let mut data = crate::synthetic::two_arm(300, 2, 1.0, 0);
        data.side_columns.get_mut("t").unwrap()[5] = 2.0;
        let err = cate_pipeline(&data, 0.1, &config(0)).unwrap_err();
        assert!(err.to_string().contains("binary"));
        let small = crate::synthetic::two_arm(60, 2, 1.0, 0);
        assert!(matches!(cate_pipeline(&small, 0.1, &config(0)), Err(Error::InsufficientData(_))));
        let mut missing = config(0);
        missing.treatment = "w".into();
        assert!(cate_pipeline(&data, 0.1, &missing).is_err());
    }
}
