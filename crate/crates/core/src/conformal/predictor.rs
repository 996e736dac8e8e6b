use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{
    check_alpha, conformal_quantile, conformal_rank, invert_score, score, CalibrationChoice, EstimatorKind,
    HeadModel, HeadValues, Learner, PredictionInterval,
};
use crate::error::{Error, Result};
use crate::matrix::{self, Matrix};
use crate::pipeline::PipelineSpec;
use crate::seed;

/// Minimum number of out-of-bag scored points for bootstrap calibration.
pub const MIN_OOB_SCORES: usize = 10;

enum Calibrated {
    Split {
        model: Arc<dyn HeadModel>,
        scores: Vec<f64>,
    },
    /// Cross-conformal: every training point is scored by the fold model
    /// that did not see it. Entries are `(fold, score)` sorted by score.
    Cross {
        models: Vec<Arc<dyn HeadModel>>,
        scored: Vec<(usize, f64)>,
    },
    /// Out-of-bag bootstrap: every point is scored by the average of the
    /// resample models that excluded it.
    Bootstrap {
        models: Vec<Arc<dyn HeadModel>>,
        scored: Vec<(Vec<u32>, f64)>,
        dropped: usize,
    },
}

/// A fitted conformal pipeline mapping feature vectors to intervals.
pub struct IntervalPredictor {
    estimator: EstimatorKind,
    calibration: CalibrationChoice,
    alpha: f64,
    dim: usize,
    state: Calibrated,
}

impl std::fmt::Debug for IntervalPredictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IntervalPredictor")
            .field("estimator", &self.estimator)
            .field("calibration", &self.calibration)
            .field("alpha", &self.alpha)
            .field("n_scores", &self.n_scores())
            .finish()
    }
}

fn check_train(x: &Matrix, y: &[f64], min: usize) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            got: y.len(),
        });
    }
    if y.len() < min {
        return Err(Error::InsufficientData(format!(
            "calibration needs at least {min} training points, got {}",
            y.len()
        )));
    }
    Ok(())
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut seed::rng(seed));
    p
}

impl IntervalPredictor {
    /// Fits `spec` on `(x, y)` with the spec's calibration method.
    pub fn fit(spec: &PipelineSpec, x: &Matrix, y: &[f64], alpha: f64, seed: u64) -> Result<Self> {
        Self::fit_with(&spec.model, spec.estimator, spec.calibration, x, y, alpha, seed)
    }

    pub fn fit_with(
        learner: &dyn Learner,
        estimator: EstimatorKind,
        calibration: CalibrationChoice,
        x: &Matrix,
        y: &[f64],
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        match calibration {
            CalibrationChoice::Split => Self::fit_split(learner, estimator, x, y, alpha, seed),
            CalibrationChoice::Kfold { folds } => Self::fit_cross(learner, estimator, folds, x, y, alpha, seed),
            CalibrationChoice::Bootstrap { n_boot } => {
                Self::fit_bootstrap(learner, estimator, n_boot, x, y, alpha, seed)
            }
        }
    }

    /// Split conformal: heads fitted on a seeded half, scores on the other half.
    pub fn fit_split(
        learner: &dyn Learner,
        estimator: EstimatorKind,
        x: &Matrix,
        y: &[f64],
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        check_train(x, y, 4)?;
        let perm = permutation(y.len(), seed);
        let (fit_idx, cal_idx) = perm.split_at(y.len().div_ceil(2));
        let model = learner.fit_heads(
            estimator,
            &x.select_rows(fit_idx),
            &matrix::select(y, fit_idx),
            alpha,
            seed::derive_seed(seed, 1),
        )?;
        let heads = model.predict_heads(&x.select_rows(cal_idx))?;
        let mut scores: Vec<f64> = heads.iter().zip(cal_idx).map(|(h, &i)| score(h, y[i])).collect();
        scores.sort_by(f64::total_cmp);
        Ok(IntervalPredictor {
            estimator,
            calibration: CalibrationChoice::Split,
            alpha,
            dim: x.cols(),
            state: Calibrated::Split { model, scores },
        })
    }

    /// K-fold cross-conformal calibration. `folds == n` is leave-one-out.
    pub fn fit_cross(
        learner: &dyn Learner,
        estimator: EstimatorKind,
        folds: usize,
        x: &Matrix,
        y: &[f64],
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        let n = y.len();
        if folds < 2 {
            return Err(Error::InvalidInput(format!("kfold calibration needs >= 2 folds, got {folds}")));
        }
        check_train(x, y, 4.max(folds))?;
        if n - n.div_ceil(folds) < 2 {
            return Err(Error::InsufficientData(format!("{folds} folds over {n} points leave too few to fit")));
        }
        let perm = permutation(n, seed);
        let mut fold_of = vec![0usize; n];
        for (pos, &i) in perm.iter().enumerate() {
            fold_of[i] = pos % folds;
        }
        let mut models = Vec::with_capacity(folds);
        let mut scored = Vec::with_capacity(n);
        for k in 0..folds {
            let (held, kept): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| fold_of[i] == k);
            let model = learner.fit_heads(
                estimator,
                &x.select_rows(&kept),
                &matrix::select(y, &kept),
                alpha,
                seed::derive_seed(seed, 1 + k as u64),
            )?;
            let heads = model.predict_heads(&x.select_rows(&held))?;
            scored.extend(heads.iter().zip(&held).map(|(h, &i)| (k, score(h, y[i]))));
            models.push(model);
        }
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        Ok(IntervalPredictor {
            estimator,
            calibration: CalibrationChoice::Kfold { folds },
            alpha,
            dim: x.cols(),
            state: Calibrated::Cross { models, scored },
        })
    }

    /// Out-of-bag bootstrap calibration over `n_boot` resamples.
    pub fn fit_bootstrap(
        learner: &dyn Learner,
        estimator: EstimatorKind,
        n_boot: usize,
        x: &Matrix,
        y: &[f64],
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        check_train(x, y, 4)?;
        if n_boot < 10 {
            return Err(Error::InvalidInput(format!("bootstrap calibration needs n_boot >= 10, got {n_boot}")));
        }
        let n = y.len();
        let mut in_bag = vec![vec![false; n]; n_boot];
        let mut models = Vec::with_capacity(n_boot);
        for (b, bag) in in_bag.iter_mut().enumerate() {
            let mut rng = seed::rng(seed::derive_seed(seed, 2 * b as u64));
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            rows.iter().for_each(|&i| bag[i] = true);
            let model = learner.fit_heads(
                estimator,
                &x.select_rows(&rows),
                &matrix::select(y, &rows),
                alpha,
                seed::derive_seed(seed, 2 * b as u64 + 1),
            )?;
            models.push(model);
        }
        // Heads only where needed: row i of model b when i is out of bag for b.
        let mut oob_heads: Vec<Vec<Option<HeadValues>>> = Vec::with_capacity(n_boot);
        for (model, bag) in models.iter().zip(&in_bag) {
            let rows: Vec<usize> = (0..n).filter(|&i| !bag[i]).collect();
            let mut heads = vec![None; n];
            if rows.is_empty() {
                oob_heads.push(heads);
                continue;
            }
            for (&i, h) in rows.iter().zip(model.predict_heads(&x.select_rows(&rows))?) {
                heads[i] = Some(h);
            }
            oob_heads.push(heads);
        }
        let mut scored = Vec::with_capacity(n);
        let mut dropped = 0usize;
        for i in 0..n {
            let oob: Vec<u32> = (0..n_boot).filter(|&b| !in_bag[b][i]).map(|b| b as u32).collect();
            if oob.is_empty() {
                dropped += 1;
                continue;
            }
            let heads = HeadValues::average(oob.iter().map(|&b| oob_heads[b as usize][i].expect("out-of-bag head")))
                .ok_or_else(|| Error::Numerical("inconsistent head shapes across bootstrap models".into()))?;
            scored.push((oob, score(&heads, y[i])));
        }
        if dropped > 0 {
            log::debug!("bootstrap calibration: {dropped} of {n} points never out of bag");
        }
        if scored.len() < MIN_OOB_SCORES {
            return Err(Error::InsufficientData(format!(
                "only {} out-of-bag scored points; increase n_boot",
                scored.len()
            )));
        }
        scored.sort_by(|a, b| a.1.total_cmp(&b.1));
        Ok(IntervalPredictor {
            estimator,
            calibration: CalibrationChoice::Bootstrap { n_boot },
            alpha,
            dim: x.cols(),
            state: Calibrated::Bootstrap { models, scored, dropped },
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn estimator(&self) -> EstimatorKind {
        self.estimator
    }

    pub fn calibration(&self) -> CalibrationChoice {
        self.calibration
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_scores(&self) -> usize {
        match &self.state {
            Calibrated::Split { scores, .. } => scores.len(),
            Calibrated::Cross { scored, .. } => scored.len(),
            Calibrated::Bootstrap { scored, .. } => scored.len(),
        }
    }

    /// Sorted calibration scores.
    pub fn scores(&self) -> Vec<f64> {
        match &self.state {
            Calibrated::Split { scores, .. } => scores.clone(),
            Calibrated::Cross { scored, .. } => scored.iter().map(|s| s.1).collect(),
            Calibrated::Bootstrap { scored, .. } => scored.iter().map(|s| s.1).collect(),
        }
    }

    /// Training points excluded from bootstrap calibration (never out of bag).
    pub fn dropped_points(&self) -> usize {
        match &self.state {
            Calibrated::Bootstrap { dropped, .. } => *dropped,
            _ => 0,
        }
    }

    /// True when too few scores exist for this alpha and intervals are unbounded.
    pub fn is_degenerate(&self) -> bool {
        conformal_rank(self.n_scores(), self.alpha) == 0
    }

    pub fn predict_interval(&self, x: &[f64]) -> Result<PredictionInterval> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.predict_intervals(&m)?[0])
    }

    pub fn predict_intervals(&self, x: &Matrix) -> Result<Vec<PredictionInterval>> {
        self.predict_intervals_at(x, self.alpha)
    }

    /// Intervals using the stored scores at a different miscoverage level.
    pub fn predict_intervals_at(&self, x: &Matrix, alpha: f64) -> Result<Vec<PredictionInterval>> {
        check_alpha(alpha)?;
        if x.cols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.cols(),
            });
        }
        match &self.state {
            Calibrated::Split { model, scores } => {
                let heads = model.predict_heads(x)?;
                let q = conformal_quantile(scores, alpha)?.unwrap_or(f64::INFINITY);
                Ok(heads.iter().map(|h| invert_score(h, q)).collect())
            }
            Calibrated::Cross { models, scored } => {
                let k = conformal_rank(scored.len(), alpha);
                let heads: Vec<Vec<HeadValues>> = models.iter().map(|m| m.predict_heads(x)).collect::<Result<_>>()?;
                Ok((0..x.rows())
                    .map(|t| endpoint_interval(k, scored.iter().map(|&(fold, s)| invert_score(&heads[fold][t], s))))
                    .collect())
            }
            Calibrated::Bootstrap { models, scored, .. } => {
                let k = conformal_rank(scored.len(), alpha);
                let heads: Vec<Vec<HeadValues>> = models.iter().map(|m| m.predict_heads(x)).collect::<Result<_>>()?;
                Ok((0..x.rows())
                    .map(|t| {
                        endpoint_interval(
                            k,
                            scored.iter().map(|(oob, s)| {
                                let h = HeadValues::average(oob.iter().map(|&b| heads[b as usize][t]))
                                    .expect("bootstrap heads share one shape");
                                invert_score(&h, *s)
                            }),
                        )
                    })
                    .collect())
            }
        }
    }
}

/// `[k-th smallest lower endpoint, k-th largest upper endpoint]`.
fn endpoint_interval(k: usize, per_point: impl Iterator<Item = PredictionInterval>) -> PredictionInterval {
    if k == 0 {
        return PredictionInterval::infinite();
    }
    // Raw endpoints: an individually crossed interval still contributes both bounds.
    let (mut lows, mut highs): (Vec<f64>, Vec<f64>) = per_point.map(|i| (i.lower, i.upper)).unzip();
    let n = lows.len();
    let k = k.min(n);
    let (_, lo, _) = lows.select_nth_unstable_by(k - 1, f64::total_cmp);
    let lo = *lo;
    let (_, hi, _) = highs.select_nth_unstable_by(n - k, f64::total_cmp);
    PredictionInterval::new(lo, *hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelHyperparams, RidgeParams};
    use crate::synthetic;

    /// Ignores its training data: identical across folds and resamples.
    struct Fixed(HeadValues);
    struct FixedModel(HeadValues);

    impl HeadModel for FixedModel {
        fn predict_heads(&self, x: &Matrix) -> Result<Vec<HeadValues>> {
            Ok(vec![self.0; x.rows()])
        }
    }

    impl Learner for Fixed {
        fn fit_heads(&self, _: EstimatorKind, _: &Matrix, _: &[f64], _: f64, _: u64) -> Result<Arc<dyn HeadModel>> {
            Ok(Arc::new(FixedModel(self.0)))
        }
    }

    /// Heads derived from a ridge mean: σ̂ ≡ 1, or both quantiles equal to μ̂.
    struct Reduced(EstimatorKind);
    struct ReducedModel(Arc<dyn HeadModel>, EstimatorKind);

    impl HeadModel for ReducedModel {
        fn predict_heads(&self, x: &Matrix) -> Result<Vec<HeadValues>> {
            Ok(self
                .0
                .predict_heads(x)?
                .into_iter()
                .map(|h| match (h, self.1) {
                    (HeadValues::Mean(mean), EstimatorKind::LocallyWeighted) => HeadValues::Weighted { mean, mad: 1.0 },
                    (HeadValues::Mean(mean), EstimatorKind::Cqr) => HeadValues::Quantiles { lower: mean, upper: mean },
                    (h, _) => h,
                })
                .collect())
        }
    }

    impl Learner for Reduced {
        fn fit_heads(&self, _: EstimatorKind, x: &Matrix, y: &[f64], alpha: f64, seed: u64) -> Result<Arc<dyn HeadModel>> {
            let inner = ridge().fit_heads(EstimatorKind::MeanResidual, x, y, alpha, seed)?;
            Ok(Arc::new(ReducedModel(inner, self.0)))
        }
    }

    fn ridge() -> ModelHyperparams {
        ModelHyperparams::Ridge(RidgeParams { lambda: 1.0 })
    }

    fn calibrations() -> [CalibrationChoice; 3] {
        [
            CalibrationChoice::Split,
            CalibrationChoice::Kfold { folds: 5 },
            CalibrationChoice::Bootstrap { n_boot: 20 },
        ]
    }

    #[test]
    fn reductions_match_mean_residual_pointwise() {
        let train = synthetic::gaussian_linear(120, 3, 1);
        let test = synthetic::gaussian_linear(50, 3, 2);
        for cal in calibrations() {
            let base = IntervalPredictor::fit_with(&ridge(), EstimatorKind::MeanResidual, cal, &train.features, &train.labels, 0.1, 7)
                .unwrap()
                .predict_intervals(&test.features)
                .unwrap();
            for est in [EstimatorKind::LocallyWeighted, EstimatorKind::Cqr] {
                let other = IntervalPredictor::fit_with(&Reduced(est), est, cal, &train.features, &train.labels, 0.1, 7)
                    .unwrap()
                    .predict_intervals(&test.features)
                    .unwrap();
                for (a, b) in base.iter().zip(&other) {
                    assert!((a.lower - b.lower).abs() < 1e-12 && (a.upper - b.upper).abs() < 1e-12, "{cal} {est:?}");
                }
            }
        }
    }

    #[test]
    fn identical_models_collapse_to_pooled_split() {
        let train = synthetic::gaussian_linear(60, 2, 3);
        let heads = HeadValues::Mean(0.25);
        for cal in [CalibrationChoice::Kfold { folds: 4 }, CalibrationChoice::Bootstrap { n_boot: 30 }] {
            let p = IntervalPredictor::fit_with(&Fixed(heads), EstimatorKind::MeanResidual, cal, &train.features, &train.labels, 0.1, 5)
                .unwrap();
            let q = conformal_quantile(&p.scores(), 0.1).unwrap().unwrap();
            let expect = invert_score(&heads, q);
            let got = p.predict_interval(&[0.0, 0.0]).unwrap();
            assert!((got.lower - expect.lower).abs() < 1e-12 && (got.upper - expect.upper).abs() < 1e-12, "{cal}");
        }
    }

    #[test]
    fn leave_one_out_runs() {
        let train = synthetic::gaussian_linear(20, 2, 4);
        let p = IntervalPredictor::fit_cross(&ridge(), EstimatorKind::MeanResidual, 20, &train.features, &train.labels, 0.1, 1)
            .unwrap();
        assert_eq!(p.n_scores(), 20);
        let i = p.predict_interval(&[0.1, -0.2]).unwrap();
        assert!(i.is_finite() && i.length() > 0.0);
    }

    #[test]
    fn split_intervals_pure_and_constant_length() {
        let train = synthetic::heteroscedastic(200, 1, 5);
        let test = synthetic::heteroscedastic(40, 1, 6);
        let p = IntervalPredictor::fit_split(&ridge(), EstimatorKind::MeanResidual, &train.features, &train.labels, 0.1, 2)
            .unwrap();
        let a = p.predict_intervals(&test.features).unwrap();
        let b = p.predict_intervals(&test.features).unwrap();
        assert_eq!(a, b);
        let len0 = a[0].length();
        assert!(a.iter().all(|i| (i.length() - len0).abs() < 1e-12));
        assert_eq!(p.predict_interval(test.features.row(3)).unwrap(), a[3]);
        assert!(p.predict_interval(&[1.0]).is_err());
    }

    #[test]
    fn noiseless_interpolation_gives_zero_length() {
        let x = Matrix::from_vec(40, 1, (0..40).map(|i| i as f64 / 10.0).collect()).unwrap();
        let y: Vec<f64> = (0..40).map(|i| 3.0 * i as f64 / 10.0 - 1.0).collect();
        let hp = ModelHyperparams::Ridge(RidgeParams { lambda: 1e-12 });
        let p = IntervalPredictor::fit_split(&hp, EstimatorKind::MeanResidual, &x, &y, 0.1, 0).unwrap();
        assert!(p.predict_interval(&[1.23]).unwrap().length() < 1e-8);
    }

    #[test]
    fn zero_mean_model_gives_symmetric_interval() {
        let train = synthetic::heteroscedastic(100, 0, 8);
        let p = IntervalPredictor::fit_split(&Fixed(HeadValues::Mean(0.0)), EstimatorKind::MeanResidual, &train.features, &train.labels, 0.1, 0)
            .unwrap();
        let a = p.predict_interval(&[0.5]).unwrap();
        let b = p.predict_interval(&[1.9]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.lower, -a.upper);
    }

    #[test]
    fn intervals_nest_in_alpha() {
        let train = synthetic::heteroscedastic(150, 1, 9);
        let test = synthetic::heteroscedastic(30, 1, 10);
        for est in EstimatorKind::ALL {
            for cal in calibrations() {
                let p = IntervalPredictor::fit_with(&ridge(), est, cal, &train.features, &train.labels, 0.2, 3).unwrap();
                let wide = p.predict_intervals_at(&test.features, 0.05).unwrap();
                let narrow = p.predict_intervals_at(&test.features, 0.2).unwrap();
                for (w, n) in wide.iter().zip(&narrow) {
                    assert!(n.empty || (w.lower <= n.lower + 1e-12 && n.upper <= w.upper + 1e-12), "{est:?} {cal}");
                }
            }
        }
    }

    #[test]
    fn degenerate_rank_gives_infinite_interval() {
        let train = synthetic::gaussian_linear(8, 1, 11);
        let p = IntervalPredictor::fit_split(&ridge(), EstimatorKind::MeanResidual, &train.features, &train.labels, 0.1, 0)
            .unwrap();
        assert!(p.is_degenerate());
        let i = p.predict_interval(&[0.0]).unwrap();
        assert!(!i.is_finite());
    }

    #[test]
    fn preconditions() {
        let train = synthetic::gaussian_linear(12, 1, 12);
        let (x, y) = (&train.features, &train.labels);
        let r = ridge();
        assert!(IntervalPredictor::fit_split(&r, EstimatorKind::MeanResidual, &x.select_rows(&[0, 1, 2]), &y[..3], 0.1, 0).is_err());
        assert!(IntervalPredictor::fit_cross(&r, EstimatorKind::MeanResidual, 1, x, y, 0.1, 0).is_err());
        assert!(IntervalPredictor::fit_cross(&r, EstimatorKind::MeanResidual, 13, x, y, 0.1, 0).is_err());
        assert!(IntervalPredictor::fit_bootstrap(&r, EstimatorKind::MeanResidual, 5, x, y, 0.1, 0).is_err());
        // Four points cannot produce ten out-of-bag scores.
        let tiny = x.select_rows(&[0, 1, 2, 3]);
        assert!(matches!(
            IntervalPredictor::fit_bootstrap(&r, EstimatorKind::MeanResidual, 10, &tiny, &y[..4], 0.1, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn out_of_bag_drop_rate_is_small() {
        // P(never out of bag) = (1 - (1 - 1/n)^n)^B ≈ (1 - e^-1)^20 ≈ 1.1e-4.
        let n = 200;
        let p_never = (1.0 - (1.0 - 1.0 / n as f64).powi(n as i32)).powi(20);
        assert!(p_never < 1e-3);
        let mut dropped = 0;
        for s in 0..25 {
            let train = synthetic::gaussian_linear(n, 1, 100 + s);
            let p = IntervalPredictor::fit_bootstrap(&ridge(), EstimatorKind::MeanResidual, 20, &train.features, &train.labels, 0.1, s)
                .unwrap();
            dropped += p.dropped_points();
            assert_eq!(p.dropped_points() + p.n_scores(), n);
        }
        assert!((dropped as f64) / ((25 * n) as f64) < 0.005);
    }

    #[test]
    fn locally_weighted_tracks_conditional_std() {
        let train = synthetic::heteroscedastic(800, 0, 13);
        let test = synthetic::heteroscedastic(400, 0, 14);
        let truth = synthetic::heteroscedastic_std(&test);
        for est in [EstimatorKind::LocallyWeighted, EstimatorKind::Cqr] {
            let p = IntervalPredictor::fit_split(&ridge(), est, &train.features, &train.labels, 0.1, 0).unwrap();
            let lengths: Vec<f64> = p.predict_intervals(&test.features).unwrap().iter().map(|i| i.length()).collect();
            let r = crate::stats::pearson(&lengths, &truth);
            assert!(r > 0.5, "{est:?}: {r}");
        }
    }
}
