//! Bayesian optimization over conformal pipelines.
//!
//! One GP per model family models the cross-validated mean interval length;
//! the estimator and calibration kernel blocks are shared. Each round refits
//! the kernel hyperparameters, maximizes expected improvement per model over
//! a candidate set, and evaluates the winning pipeline.

mod evaluate;
mod space;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conformal::IntervalPredictor;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gp::{self, AdditiveKernelParams, GPState, GpData, HyperOptConfig, PipelineEncoding, TargetTransform};
use crate::matrix::Matrix;
use crate::pipeline::PipelineSpec;
use crate::seed::{derive_seed, rng};

pub use evaluate::{evaluate_pipeline, fold_assignment, penalty, EvaluationRecord, PENALTY_FACTOR};
pub use space::{
    CalibrationRanges, ForestRange, MlpRange, ModelRanges, RidgeRange, SearchBudget, SearchConfig, SearchSpace,
};

pub const N_QUASI_RANDOM: usize = 1024;
pub const N_LOCAL: usize = 256;
const LOCAL_SD: f64 = 0.1;
const LOCAL_SWITCH_PROB: f64 = 0.15;
/// Cost-aware acquisition never rewards pipelines faster than this.
const MIN_COST_SECONDS: f64 = 1.0;
pub const MIN_TRAIN_POINTS: usize = 40;

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Expected improvement below `best` of a normal with the given mean and
/// standard deviation.
pub fn expected_improvement(mean: f64, std: f64, best: f64) -> f64 {
    let gain = best - mean;
    if !(std > 0.0) {
        return gain.max(0.0);
    }
    let z = gain / std;
    (gain * std_normal_cdf(z) + std * std_normal_pdf(z)).max(0.0)
}

/// Anything that can score a pipeline; the search minimizes `mean_length`.
pub trait Objective: Sync {
    fn evaluate(&self, spec: &PipelineSpec) -> Result<EvaluationRecord>;
}

/// The cross-validated length objective on fixed training data.
pub struct LengthObjective<'a> {
    pub x: &'a Matrix,
    pub y: &'a [f64],
    pub alpha: f64,
    pub j_folds: usize,
    /// Shared by every evaluation so all pipelines see the same folds.
    pub seed: u64,
}

impl Objective for LengthObjective<'_> {
    fn evaluate(&self, spec: &PipelineSpec) -> Result<EvaluationRecord> {
        evaluate_pipeline(self.x, self.y, spec, self.alpha, self.j_folds, self.seed)
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    r
}

const PRIMES: [u64; 10] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29];

/// `n` points of a Halton sequence in `[0, 1)^dim` with a seeded
/// Cranley-Patterson rotation.
pub fn halton(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!(dim <= PRIMES.len(), "halton supports up to {} dims", PRIMES.len());
    let mut r = rng(seed);
    let shift: Vec<f64> = (0..dim).map(|_| r.random()).collect();
    (1..=n as u64)
        .map(|i| {
            (0..dim)
                .map(|d| {
                    let v = radical_inverse(i, PRIMES[d]) + shift[d];
                    v - v.floor()
                })
                .collect()
        })
        .collect()
}

fn pick(u: f64, n: usize) -> usize {
    ((u * n as f64) as usize).min(n - 1)
}

/// Candidate encodings for one model: quasi-random points over the whole
/// (restricted) space plus Gaussian perturbations of the incumbent.
pub fn candidates(space: &SearchSpace, slot: usize, incumbent: Option<&PipelineEncoding>, seed: u64) -> Vec<PipelineEncoding> {
    let dim = SearchSpace::model_dim(space.models[slot]);
    let est: Vec<usize> = space.estimators.iter().map(|e| e.index()).collect();
    let cal: Vec<usize> = space.calibrations.iter().map(|c| c.index()).collect();
    let mut out: Vec<PipelineEncoding> = halton(N_QUASI_RANDOM, dim + 3, derive_seed(seed, 0))
        .into_iter()
        .map(|u| PipelineEncoding {
            model_slot: slot,
            model: u[..dim].to_vec(),
            estimator: est[pick(u[dim], est.len())],
            calibration: cal[pick(u[dim + 1], cal.len())],
            calibration_level: u[dim + 2],
        })
        .collect();
    if let Some(inc) = incumbent {
        let mut r = rng(derive_seed(seed, 1));
        let normal = Normal::new(0.0, LOCAL_SD).expect("valid sd");
        for _ in 0..N_LOCAL {
            let mut e = inc.clone();
            for v in e.model.iter_mut() {
                *v = (*v + normal.sample(&mut r)).clamp(0.0, 1.0);
            }
            e.calibration_level = (e.calibration_level + normal.sample(&mut r)).clamp(0.0, 1.0);
            if r.random::<f64>() < LOCAL_SWITCH_PROB {
                e.estimator = est[r.random_range(0..est.len())];
            }
            if r.random::<f64>() < LOCAL_SWITCH_PROB {
                e.calibration = cal[r.random_range(0..cal.len())];
            }
            out.push(e);
        }
    }
    out
}

/// Surrogate state for one acquisition round.
pub struct Surrogates<'a> {
    /// One length GP per model slot, in raw-unit-aware transforms.
    pub length: &'a [GPState],
    /// Optional GPs on log wall-seconds, one per slot.
    pub cost: Option<&'a [GPState]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub slot: usize,
    pub spec: PipelineSpec,
    pub encoding: PipelineEncoding,
    /// Expected improvement, divided by the predicted cost when cost-aware.
    pub acquisition: f64,
    pub expected_improvement: f64,
}

/// Scores one canonical encoding. Returns (acquisition, EI).
pub fn acquisition(surrogates: &Surrogates, enc: &PipelineEncoding, best: f64) -> Result<(f64, f64)> {
    let (m, v) = surrogates.length[enc.model_slot].posterior_raw(enc)?;
    let ei = expected_improvement(m, v.sqrt(), best);
    let acq = match surrogates.cost {
        Some(cost) => {
            let (log_secs, _) = cost[enc.model_slot].posterior_raw(enc)?;
            ei / log_secs.exp().max(MIN_COST_SECONDS)
        }
        None => ei,
    };
    Ok((acq, ei))
}

/// Maximizes the acquisition over each model's candidates and returns the
/// overall winner. Specs in `exclude` (already evaluated) are skipped unless
/// nothing else is left.
pub fn propose(
    space: &SearchSpace,
    surrogates: &Surrogates,
    best: f64,
    incumbents: &[Option<PipelineEncoding>],
    exclude: &[PipelineSpec],
    seed: u64,
) -> Result<Proposal> {
    let mut winner: Option<Proposal> = None;
    let mut fallback: Option<Proposal> = None;
    for slot in 0..space.models.len() {
        for raw in candidates(space, slot, incumbents.get(slot).and_then(Option::as_ref), derive_seed(seed, slot as u64)) {
            let spec = space.decode(&raw)?;
            let enc = space.encode(&spec)?;
            let (acq, ei) = acquisition(surrogates, &enc, best)?;
            let seen = exclude.contains(&spec);
            let target = if seen { &mut fallback } else { &mut winner };
            if target.as_ref().is_none_or(|w| acq > w.acquisition) {
                *target = Some(Proposal {
                    slot,
                    spec,
                    encoding: enc,
                    acquisition: acq,
                    expected_improvement: ei,
                });
            }
        }
    }
    winner.or(fallback).ok_or_else(|| Error::Search("no candidates".into()))
}

/// Full search history in evaluation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHistory {
    pub records: Vec<EvaluationRecord>,
    /// Index of the best unflagged record.
    pub best: usize,
    /// Evaluations made before the first acquisition.
    pub n_initial: usize,
}

impl SearchHistory {
    pub fn best_record(&self) -> &EvaluationRecord {
        &self.records[self.best]
    }

    /// Best unflagged mean length after each evaluation (penalty until the first).
    pub fn running_best(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.records
            .iter()
            .map(|r| {
                if !r.flagged || best.is_infinite() {
                    best = best.min(r.mean_length);
                }
                best
            })
            .collect()
    }
}

fn best_unflagged(records: &[EvaluationRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        if !r.flagged && best.is_none_or(|b| r.mean_length < records[b].mean_length) {
            best = Some(i);
        }
    }
    best
}

/// Uniform draw over a model's block and the allowed categories.
pub fn random_encoding(space: &SearchSpace, slot: usize, r: &mut impl Rng) -> PipelineEncoding {
    let dim = SearchSpace::model_dim(space.models[slot]);
    PipelineEncoding {
        model_slot: slot,
        model: (0..dim).map(|_| r.random()).collect(),
        estimator: space.estimators[r.random_range(0..space.estimators.len())].index(),
        calibration: space.calibrations[r.random_range(0..space.calibrations.len())].index(),
        calibration_level: r.random(),
    }
}

fn fit_surrogates(
    per_slot: &[GpData],
    pooled: &[f64],
    params: &AdditiveKernelParams,
) -> Result<Vec<GPState>> {
    let fallback = TargetTransform::standardize(pooled);
    per_slot
        .iter()
        .map(|d| {
            let t = if d.targets.is_empty() {
                fallback
            } else {
                TargetTransform::standardize(&d.targets)
            };
            gp::gp_fit(&d.inputs, &d.targets, params, t)
        })
        .collect()
}

fn refit_params(data: &[GpData], params: &AdditiveKernelParams, seed: u64) -> AdditiveKernelParams {
    if data.iter().map(|d| d.targets.len()).sum::<usize>() < 2 {
        return params.clone();
    }
    match gp::optimize_hyperparams(data, params, &HyperOptConfig::default(), seed) {
        Ok((p, _)) => p,
        Err(e) => {
            log::warn!("kernel hyperparameter fit failed, keeping incumbent: {e}");
            params.clone()
        }
    }
}

/// Runs the search against any objective.
pub fn search(space: &SearchSpace, budget: &SearchBudget, objective: &dyn Objective) -> Result<SearchHistory> {
    space.validate()?;
    budget.validate()?;
    let mut r = rng(derive_seed(budget.seed, 1));
    let mut records: Vec<EvaluationRecord> = Vec::new();
    let mut encodings: Vec<PipelineEncoding> = Vec::new();
    for slot in 0..space.models.len() {
        for _ in 0..budget.n_init {
            let spec = space.decode(&random_encoding(space, slot, &mut r))?;
            encodings.push(space.encode(&spec)?);
            records.push(objective.evaluate(&spec)?);
        }
    }
    let n_initial = records.len();
    let dims = space.model_dims();
    let mut params = AdditiveKernelParams::default_for(&dims);
    let mut cost_params = AdditiveKernelParams::default_for(&dims);

    for iter in 0..budget.n_iter {
        let round_seed = derive_seed(budget.seed, 100 + iter as u64);
        let mut length_data = vec![GpData::default(); dims.len()];
        let mut cost_data = vec![GpData::default(); dims.len()];
        for (rec, enc) in records.iter().zip(&encodings) {
            if !rec.flagged {
                length_data[enc.model_slot].inputs.push(enc.clone());
                length_data[enc.model_slot].targets.push(rec.mean_length);
            }
            cost_data[enc.model_slot].inputs.push(enc.clone());
            cost_data[enc.model_slot].targets.push(rec.wall_seconds.ln());
        }
        let proposal_spec = match best_unflagged(&records) {
            None => space.decode(&random_encoding(space, r.random_range(0..dims.len()), &mut r))?,
            Some(b) => {
                let best = records[b].mean_length;
                params = refit_params(&length_data, &params, derive_seed(round_seed, 0));
                let pooled: Vec<f64> = length_data.iter().flat_map(|d| d.targets.iter().copied()).collect();
                let length_states = fit_surrogates(&length_data, &pooled, &params)?;
                let cost_states = if budget.cost_aware {
                    cost_params = refit_params(&cost_data, &cost_params, derive_seed(round_seed, 1));
                    let pooled: Vec<f64> = cost_data.iter().flat_map(|d| d.targets.iter().copied()).collect();
                    Some(fit_surrogates(&cost_data, &pooled, &cost_params)?)
                } else {
                    None
                };
                let incumbents: Vec<Option<PipelineEncoding>> = (0..dims.len())
                    .map(|slot| {
                        let best_in_slot = records
                            .iter()
                            .zip(&encodings)
                            .filter(|(rec, enc)| !rec.flagged && enc.model_slot == slot)
                            .min_by(|a, b| a.0.mean_length.total_cmp(&b.0.mean_length));
                        best_in_slot.map(|(_, e)| e.clone())
                    })
                    .collect();
                let seen: Vec<PipelineSpec> = records.iter().map(|r| r.spec).collect();
                let surrogates = Surrogates {
                    length: &length_states,
                    cost: cost_states.as_deref(),
                };
                let p = propose(space, &surrogates, best, &incumbents, &seen, derive_seed(round_seed, 2))?;
                log::debug!("round {iter}: {} (EI {:.3e})", p.spec, p.expected_improvement);
                p.spec
            }
        };
        encodings.push(space.encode(&proposal_spec)?);
        records.push(objective.evaluate(&proposal_spec)?);
    }
    let best = best_unflagged(&records).ok_or_else(|| {
        Error::Search(format!(
            "all {} evaluated pipelines produced infinite or failed intervals; use more training data or a larger alpha",
            records.len()
        ))
    })?;
    Ok(SearchHistory {
        records,
        best,
        n_initial,
    })
}

pub struct AutoCpResult {
    pub history: SearchHistory,
    /// The winning pipeline refitted on all training data.
    pub predictor: IntervalPredictor,
}

impl AutoCpResult {
    pub fn best(&self) -> &EvaluationRecord {
        self.history.best_record()
    }
}

/// Searches for the pipeline with the shortest cross-validated intervals
/// and refits it on the full training set.
pub fn run_autocp(train: &Dataset, alpha: f64, config: &SearchConfig) -> Result<AutoCpResult> {
    crate::conformal::check_alpha(alpha)?;
    if train.len() < MIN_TRAIN_POINTS {
        return Err(Error::InsufficientData(format!(
            "search needs at least {MIN_TRAIN_POINTS} training points, got {}",
            train.len()
        )));
    }
    let objective = LengthObjective {
        x: &train.features,
        y: &train.labels,
        alpha,
        j_folds: config.budget.j_folds,
        seed: derive_seed(config.budget.seed, 2),
    };
    let history = search(&config.space, &config.budget, &objective)?;
    let spec = history.best_record().spec;
    let predictor = IntervalPredictor::fit(&spec, &train.features, &train.labels, alpha, derive_seed(config.budget.seed, 3))?;
    Ok(AutoCpResult { history, predictor })
}
