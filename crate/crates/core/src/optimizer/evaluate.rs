//! The cross-validated interval-length objective.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::IntervalPredictor;
use crate::error::{Error, Result};
use crate::matrix::{select, Matrix};
use crate::pipeline::PipelineSpec;
use crate::seed::{self, derive_seed};

/// Multiplier on the label range for flagged evaluations.
pub const PENALTY_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub spec: PipelineSpec,
    /// Mean of the per-fold mean lengths, or the penalty when flagged.
    pub mean_length: f64,
    pub mean_coverage: f64,
    pub wall_seconds: f64,
    pub fold_lengths: Vec<f64>,
    pub flagged: bool,
    /// Why the record was flagged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl EvaluationRecord {
    /// The record with `wall_seconds` zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> EvaluationRecord {
        EvaluationRecord {
            wall_seconds: 0.0,
            ..self.clone()
        }
    }
}

pub fn penalty(y: &[f64]) -> f64 {
    let (lo, hi) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    PENALTY_FACTOR * if range > 0.0 { range } else { 1.0 }
}

/// Assigns each of `n` rows to one of `j` folds of near-equal size.
pub fn fold_assignment(n: usize, j: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos * j / n;
    }
    fold
}

struct FoldResult {
    length: f64,
    coverage: f64,
}

fn run_fold(x: &Matrix, y: &[f64], folds: &[usize], j: usize, spec: &PipelineSpec, alpha: f64, seed: u64) -> Result<Option<FoldResult>> {
    let train: Vec<usize> = (0..y.len()).filter(|&i| folds[i] != j).collect();
    let valid: Vec<usize> = (0..y.len()).filter(|&i| folds[i] == j).collect();
    let predictor = IntervalPredictor::fit(spec, &x.select_rows(&train), &select(y, &train), alpha, seed)?;
    if predictor.is_degenerate() {
        return Ok(None);
    }
    let intervals = predictor.predict_intervals(&x.select_rows(&valid))?;
    if intervals.iter().any(|iv| !iv.is_finite()) {
        return Ok(None);
    }
    let n = valid.len() as f64;
    Ok(Some(FoldResult {
        length: intervals.iter().map(|iv| iv.length()).sum::<f64>() / n,
        coverage: valid.iter().zip(&intervals).filter(|(&i, iv)| iv.contains(y[i])).count() as f64 / n,
    }))
}

/// `j_folds`-fold outer cross-validation of `spec`'s mean interval length.
///
/// Infinite intervals, too little data for the calibration, and numerical
/// failures of the learner produce a flagged record carrying the penalty.
pub fn evaluate_pipeline(x: &Matrix, y: &[f64], spec: &PipelineSpec, alpha: f64, j_folds: usize, seed: u64) -> Result<EvaluationRecord> {
    if x.rows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            got: y.len(),
        });
    }
    if j_folds < 2 || j_folds > y.len() {
        return Err(Error::InvalidInput(format!("j_folds {j_folds} invalid for {} rows", y.len())));
    }
    let start = Instant::now();
    let folds = fold_assignment(y.len(), j_folds, derive_seed(seed, 0));
    let results: Vec<Result<Option<FoldResult>>> = (0..j_folds)
        .into_par_iter()
        .map(|j| run_fold(x, y, &folds, j, spec, alpha, derive_seed(seed, 1 + j as u64)))
        .collect();
    let mut lengths = Vec::with_capacity(j_folds);
    let mut coverages = Vec::with_capacity(j_folds);
    let mut note = None;
    for r in results {
        match r {
            Ok(Some(f)) => {
                lengths.push(f.length);
                coverages.push(f.coverage);
            }
            Ok(None) => {
                note.get_or_insert_with(|| "infinite interval".to_string());
            }
            Err(e @ (Error::InsufficientData(_) | Error::Numerical(_) | Error::Singular(_))) => {
                note.get_or_insert_with(|| e.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    let wall_seconds = start.elapsed().as_secs_f64().max(1e-6);
    let flagged = note.is_some();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(EvaluationRecord {
        spec: *spec,
        mean_length: if flagged { penalty(y) } else { mean(&lengths) },
        mean_coverage: mean(&coverages),
        wall_seconds,
        fold_lengths: lengths,
        flagged,
        note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{CalibrationChoice, EstimatorKind};
    use crate::models::{ModelHyperparams, RidgeParams};

    fn data(n: usize, seed: u64) -> (Matrix, Vec<f64>) {
        let ds = crate::synthetic::gaussian_linear(n, 2, seed);
        (ds.features, ds.labels)
    }

    fn spec(calibration: CalibrationChoice) -> PipelineSpec {
        PipelineSpec {
            model: ModelHyperparams::Ridge(RidgeParams { lambda: 1.0 }),
            estimator: EstimatorKind::MeanResidual,
            calibration,
        }
    }

    #[test]
    fn constant_model_matches_hand_computation() {
        // With a huge penalty ridge predicts the training mean; the fold
        // length is then twice the conformal quantile of |y - ybar| over the
        // calibration half.
        let (x, y) = data(20, 7);
        let spec = PipelineSpec {
            model: ModelHyperparams::Ridge(RidgeParams { lambda: 1e12 }),
            ..spec(CalibrationChoice::Split)
        };
        let seed = 11;
        let alpha = 0.2;
        let rec = evaluate_pipeline(&x, &y, &spec, alpha, 2, seed).unwrap();
        assert!(!rec.flagged);
        let folds = fold_assignment(20, 2, derive_seed(seed, 0));
        for j in 0..2 {
            let train: Vec<usize> = (0..20).filter(|&i| folds[i] != j).collect();
            // Same split as the predictor: a seeded permutation, first half fits.
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..train.len()).collect();
            perm.shuffle(&mut seed::rng(derive_seed(seed, 1 + j as u64)));
            let n1 = train.len().div_ceil(2);
            let fit: Vec<f64> = perm[..n1].iter().map(|&p| y[train[p]]).collect();
            let ybar = fit.iter().sum::<f64>() / fit.len() as f64;
            let mut scores: Vec<f64> = perm[n1..].iter().map(|&p| (y[train[p]] - ybar).abs()).collect();
            scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let k = ((scores.len() + 1) as f64 * alpha + 1e-9).floor() as usize;
            let q = scores[k - 1];
            assert!((rec.fold_lengths[j] - 2.0 * q).abs() < 1e-6, "fold {j}: {} vs {}", rec.fold_lengths[j], 2.0 * q);
        }
        let mean = rec.fold_lengths.iter().sum::<f64>() / 2.0;
        assert_eq!(rec.mean_length, mean);
    }

    #[test]
    fn deterministic_given_seed() {
        let (x, y) = data(60, 1);
        let s = spec(CalibrationChoice::Kfold { folds: 3 });
        let a = evaluate_pipeline(&x, &y, &s, 0.1, 3, 5).unwrap();
        let b = evaluate_pipeline(&x, &y, &s, 0.1, 3, 5).unwrap();
        assert_eq!(a.without_timing(), b.without_timing());
        assert!((0.0..=1.0).contains(&a.mean_coverage));
    }

    #[test]
    fn too_little_data_is_penalized() {
        let (x, y) = data(12, 2);
        let rec = evaluate_pipeline(&x, &y, &spec(CalibrationChoice::Split), 0.1, 3, 0).unwrap();
        assert!(rec.flagged);
        assert_eq!(rec.mean_length, penalty(&y));
        let rec = evaluate_pipeline(&x, &y, &spec(CalibrationChoice::Bootstrap { n_boot: 10 }), 0.1, 3, 0).unwrap();
        assert!(rec.flagged);
    }
}
