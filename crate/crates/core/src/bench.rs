//! Repeated train/test benchmark protocols and their report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{CalibrationChoice, EstimatorKind, IntervalPredictor};
use crate::dataset::{make_splits, normalize_with, Dataset, LabelScaling};
use crate::error::{Error, Result};
use crate::models::{ForestParams, MlpParams, ModelHyperparams, ModelKind, RidgeParams};
use crate::optimizer::{run_autocp, SearchConfig, SearchSpace};
use crate::pipeline::PipelineSpec;
use crate::seed::derive_seed;

pub const SCHEMA_VERSION: u32 = 1;

/// Names of the fixed baseline pipelines, in report order.
pub const PRESETS: [&str; 8] = [
    "SCP-Ridge",
    "SCP-RF",
    "SCP-NN",
    "SCP-Ridge-Local",
    "SCP-RF-Local",
    "SCP-NN-Local",
    "CQR-NN",
    "CQR-RF",
];

pub const AUTOCP: &str = "AutoCP";

fn preset_ridge() -> ModelHyperparams {
    ModelHyperparams::Ridge(RidgeParams { lambda: 1.0 })
}

fn preset_forest() -> ModelHyperparams {
    ModelHyperparams::Forest(ForestParams {
        n_trees: 100,
        max_depth: 20,
        min_leaf: 5,
        feature_frac: 1.0 / 3.0,
        bootstrap: true,
    })
}

fn preset_mlp() -> ModelHyperparams {
    ModelHyperparams::Mlp(MlpParams {
        hidden: 64,
        layers: 2,
        learning_rate: 1e-2,
        epochs: 200,
        weight_decay: 1e-4,
    })
}

/// Fixed split-conformal pipeline for a preset name (case-insensitive).
pub fn preset(name: &str) -> Option<PipelineSpec> {
    let (model, estimator) = match name.to_ascii_lowercase().as_str() {
        "scp-ridge" => (preset_ridge(), EstimatorKind::MeanResidual),
        "scp-rf" => (preset_forest(), EstimatorKind::MeanResidual),
        "scp-nn" => (preset_mlp(), EstimatorKind::MeanResidual),
        "scp-ridge-local" => (preset_ridge(), EstimatorKind::LocallyWeighted),
        "scp-rf-local" => (preset_forest(), EstimatorKind::LocallyWeighted),
        "scp-nn-local" => (preset_mlp(), EstimatorKind::LocallyWeighted),
        "cqr-nn" => (preset_mlp(), EstimatorKind::Cqr),
        "cqr-rf" => (preset_forest(), EstimatorKind::Cqr),
        _ => return None,
    };
    Some(PipelineSpec {
        model,
        estimator,
        calibration: CalibrationChoice::Split,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Search(SearchConfig),
    Fixed { name: String, spec: PipelineSpec },
}

impl Algorithm {
    pub fn preset(name: &str) -> Result<Algorithm> {
        let spec = preset(name).ok_or_else(|| {
            Error::Config(format!("unknown preset '{name}'; expected one of {}", PRESETS.join(", ")))
        })?;
        let canonical = PRESETS.iter().find(|p| p.eq_ignore_ascii_case(name)).expect("preset exists");
        Ok(Algorithm::Fixed {
            name: canonical.to_string(),
            spec,
        })
    }

    pub fn name(&self) -> &str {
        match self {
            Algorithm::Search(_) => AUTOCP,
            Algorithm::Fixed { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub dataset: String,
    pub alpha: f64,
    pub n_splits: usize,
    pub train_frac: f64,
    pub seed: u64,
    /// Concurrent splits; 0 uses the global pool.
    pub jobs: usize,
    pub label_scaling: LabelScaling,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dataset: "data".into(),
            alpha: 0.1,
            n_splits: 20,
            train_frac: 0.8,
            seed: 0,
            jobs: 0,
            label_scaling: LabelScaling::MeanAbsolute,
        }
    }
}

/// One train/test split's outcome. Lengths are in normalized label units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub schema_version: u32,
    pub dataset: String,
    pub algorithm: String,
    pub alpha: f64,
    pub split: usize,
    pub split_seed: u64,
    pub test_coverage: f64,
    pub mean_test_length: f64,
    pub spec: PipelineSpec,
    /// Cross-validated length of the chosen pipeline, when searched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv_length: Option<f64>,
    pub evaluations: usize,
    /// Kept out of `records.jsonl` so reports stay byte-identical.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub coverage_mean: f64,
    pub coverage_std: f64,
    pub length_mean: f64,
    pub length_std: f64,
}

impl Aggregate {
    pub fn from_records(records: &[SplitRecord]) -> Aggregate {
        let cov: Vec<f64> = records.iter().map(|r| r.test_coverage).collect();
        let len: Vec<f64> = records.iter().map(|r| r.mean_test_length).collect();
        Aggregate {
            coverage_mean: crate::stats::mean(&cov),
            coverage_std: crate::stats::std_dev(&cov),
            length_mean: crate::stats::mean(&len),
            length_std: crate::stats::std_dev(&len),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub dataset: String,
    pub algorithm: String,
    pub alpha: f64,
    pub splits: Vec<SplitRecord>,
    pub aggregate: Aggregate,
}

impl RunReport {
    pub fn from_records(records: Vec<SplitRecord>) -> Result<RunReport> {
        let first = records.first().ok_or_else(|| Error::InvalidInput("report has no split records".into()))?;
        if records
            .iter()
            .any(|r| r.dataset != first.dataset || r.algorithm != first.algorithm || r.alpha != first.alpha)
        {
            return Err(Error::InvalidInput("split records mix datasets, algorithms or alphas".into()));
        }
        Ok(RunReport {
            schema_version: SCHEMA_VERSION,
            dataset: first.dataset.clone(),
            algorithm: first.algorithm.clone(),
            alpha: first.alpha,
            aggregate: Aggregate::from_records(&records),
            splits: records,
        })
    }

    pub fn records_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.splits {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let a = &self.aggregate;
        format!(
            "schema_version,dataset,algorithm,alpha,n_splits,coverage_mean,coverage_std,length_mean,length_std\n{},{},{},{},{},{},{},{},{}\n",
            self.schema_version,
            self.dataset,
            self.algorithm,
            self.alpha,
            self.splits.len(),
            a.coverage_mean,
            a.coverage_std,
            a.length_mean,
            a.length_std
        )
    }

    /// Per-split wall time in milliseconds.
    pub fn timings_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.splits {
            let _ = writeln!(out, "{{\"split\":{},\"wall_ms\":{}}}", r.split, (r.wall_seconds * 1000.0).round() as u64);
        }
        out
    }

    /// Writes `records.jsonl`, `summary.csv` and `timings.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| io_err(dir, source))?;
        for (name, body) in [
            ("records.jsonl", self.records_jsonl()),
            ("summary.csv", self.summary_csv()),
            ("timings.jsonl", self.timings_jsonl()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|source| io_err(&path, source))?;
        }
        Ok(())
    }

    /// Loads a report written by [`write`](Self::write) (timings are not restored).
    pub fn read(dir: &Path) -> Result<RunReport> {
        let path = dir.join("records.jsonl");
        let text = std::fs::read_to_string(&path).map_err(|source| io_err(&path, source))?;
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<SplitRecord>(l)
                    .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_records(records)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn run_split(data: &Dataset, config: &BenchConfig, algorithm: &Algorithm, split: usize, plan: &crate::dataset::SplitPlan) -> Result<SplitRecord> {
    let start = Instant::now();
    let ds = normalize_with(data, &plan.train_indices, config.label_scaling)?;
    let train = ds.subset(&plan.train_indices);
    let test = ds.subset(&plan.test_indices);
    let (spec, predictor, cv_length, evaluations) = match algorithm {
        Algorithm::Search(search) => {
            let mut search = search.clone();
            search.budget.seed = derive_seed(plan.seed, 1);
            let out = run_autocp(&train, config.alpha, &search)?;
            let best = out.best().clone();
            (best.spec, out.predictor, Some(best.mean_length), out.history.records.len())
        }
        Algorithm::Fixed { spec, .. } => {
            let p = IntervalPredictor::fit(spec, &train.features, &train.labels, config.alpha, derive_seed(plan.seed, 1))?;
            (*spec, p, None, 0)
        }
    };
    let intervals = predictor.predict_intervals(&test.features)?;
    let n = test.len() as f64;
    let covered = intervals.iter().zip(&test.labels).filter(|(iv, &y)| iv.contains(y)).count();
    Ok(SplitRecord {
        schema_version: SCHEMA_VERSION,
        dataset: config.dataset.clone(),
        algorithm: algorithm.name().to_string(),
        alpha: config.alpha,
        split,
        split_seed: plan.seed,
        test_coverage: covered as f64 / n,
        mean_test_length: intervals.iter().map(|iv| iv.length()).sum::<f64>() / n,
        spec,
        cv_length,
        evaluations,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs `algorithm` on `n_splits` seeded train/test splits. Features are
/// standardized and labels rescaled on each split's training rows; split
/// results are merged in split order.
pub fn run_benchmark(data: &Dataset, config: &BenchConfig, algorithm: &Algorithm) -> Result<RunReport> {
    crate::conformal::check_alpha(config.alpha)?;
    if config.n_splits == 0 {
        return Err(Error::Config("need at least one split".into()));
    }
    let plans = make_splits(data.len(), config.n_splits, config.train_frac, config.seed)?;
    let records = with_jobs(config.jobs, || {
        plans
            .par_iter()
            .enumerate()
            .map(|(s, plan)| run_split(data, config, algorithm, s, plan))
            .collect::<Result<Vec<_>>>()
    })??;
    RunReport::from_records(records)
}

/// Lengths of the two restricted searches and the full search on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub model_cal: RunReport,
    pub estimator_cal: RunReport,
    pub full: RunReport,
}

impl GainReport {
    pub fn table_csv(&self) -> String {
        let a = |r: &RunReport| (r.aggregate.length_mean, r.aggregate.length_std);
        let (m, ms) = a(&self.model_cal);
        let (e, es) = a(&self.estimator_cal);
        let (f, fs) = a(&self.full);
        format!(
            "schema_version,dataset,model_cal_length,model_cal_std,estimator_cal_length,estimator_cal_std,full_length,full_std\n{SCHEMA_VERSION},{},{m},{ms},{e},{es},{f},{fs}\n",
            self.full.dataset
        )
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, r) in [("model_cal", &self.model_cal), ("estimator_cal", &self.estimator_cal), ("full", &self.full)] {
            r.write(&dir.join(name))?;
        }
        let path = dir.join("gain.csv");
        std::fs::write(&path, self.table_csv()).map_err(|source| io_err(&path, source))
    }
}

/// Runs the estimator-fixed (CQR), model-fixed (MLP) and unrestricted searches
/// over `search`'s space.
pub fn run_source_of_gain(data: &Dataset, config: &BenchConfig, search: &SearchConfig) -> Result<GainReport> {
    let variant = |restrict: fn(&mut SearchSpace), label: &str| -> Result<RunReport> {
        let mut cfg = search.clone();
        restrict(&mut cfg.space);
        cfg.space.validate()?;
        let mut report = run_benchmark(data, config, &Algorithm::Search(cfg))?;
        report.algorithm = label.to_string();
        report.splits.iter_mut().for_each(|s| s.algorithm = label.to_string());
        Ok(report)
    };
    Ok(GainReport {
        model_cal: variant(|s| s.estimators = vec![EstimatorKind::Cqr], "Model+Cal")?,
        estimator_cal: variant(|s| s.models = vec![ModelKind::Mlp], "Estimator+Cal")?,
        full: variant(|_| {}, AUTOCP)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedLength {
    pub dataset: String,
    pub algorithm: String,
    pub mean_length: f64,
    /// Mean length divided by the worst algorithm's on the same dataset.
    pub normalized: f64,
}

/// Per dataset, each algorithm's mean length over the largest one.
pub fn emit_plot_data(reports: &[RunReport]) -> Result<Vec<NormalizedLength>> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no reports to normalize".into()));
    }
    let mut by_dataset: BTreeMap<&str, Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        by_dataset.entry(&r.dataset).or_default().push(r);
    }
    let mut out = Vec::new();
    for (dataset, group) in by_dataset {
        let first = group[0];
        for r in &group {
            if r.alpha != first.alpha || r.splits.len() != first.splits.len() {
                return Err(Error::InvalidInput(format!(
                    "reports on '{dataset}' differ in alpha or split count ({} vs {})",
                    first.algorithm, r.algorithm
                )));
            }
        }
        let mut names: Vec<&str> = group.iter().map(|r| r.algorithm.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput(format!("duplicate algorithm in reports on '{dataset}'")));
        }
        let worst = group.iter().map(|r| r.aggregate.length_mean).fold(f64::NEG_INFINITY, f64::max);
        if !(worst > 0.0 && worst.is_finite()) {
            return Err(Error::Numerical(format!("worst mean length on '{dataset}' is {worst}")));
        }
        out.extend(group.iter().map(|r| NormalizedLength {
            dataset: dataset.to_string(),
            algorithm: r.algorithm.clone(),
            mean_length: r.aggregate.length_mean,
            normalized: r.aggregate.length_mean / worst,
        }));
    }
    Ok(out)
}

pub fn plot_data_csv(rows: &[NormalizedLength]) -> String {
    let mut out = String::from("schema_version,dataset,algorithm,mean_length,normalized_length\n");
    for r in rows {
        let _ = writeln!(out, "{SCHEMA_VERSION},{},{},{},{}", r.dataset, r.algorithm, r.mean_length, r.normalized);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(dataset: &str, algorithm: &str, lengths: &[f64]) -> RunReport {
        let splits = lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| SplitRecord {
                schema_version: SCHEMA_VERSION,
                dataset: dataset.into(),
                algorithm: algorithm.into(),
                alpha: 0.1,
                split: i,
                split_seed: i as u64,
                test_coverage: 0.9,
                mean_test_length: l,
                spec: preset("SCP-Ridge").unwrap(),
                cv_length: None,
                evaluations: 0,
                wall_seconds: 0.5,
            })
            .collect();
        RunReport::from_records(splits).unwrap()
    }

    #[test]
    fn presets_cover_eight_baselines() {
        for name in PRESETS {
            let spec = preset(name).unwrap();
            assert_eq!(spec.calibration, CalibrationChoice::Split);
            assert!(SearchSpace::default().contains(&spec), "{name}");
        }
        assert_eq!(preset("cqr-rf").unwrap().estimator, EstimatorKind::Cqr);
        assert!(preset("SCP-SVM").is_none());
        assert_eq!(Algorithm::preset("scp-nn-local").unwrap().name(), "SCP-NN-Local");
    }

    #[test]
    fn normalized_lengths() {
        let rows = emit_plot_data(&[report("d", "a", &[2.0]), report("d", "b", &[1.0]), report("d", "c", &[4.0])]).unwrap();
        let v: Vec<f64> = rows.iter().map(|r| r.normalized).collect();
        assert_eq!(v, vec![0.5, 0.25, 1.0]);
        let single = emit_plot_data(&[report("d", "a", &[3.0])]).unwrap();
        assert_eq!(single[0].normalized, 1.0);
        assert!(emit_plot_data(&[report("d", "a", &[1.0]), report("d", "a", &[2.0])]).is_err());
        assert!(emit_plot_data(&[report("d", "a", &[1.0]), report("d", "b", &[2.0, 2.0])]).is_err());
        assert!(emit_plot_data(&[]).is_err());
    }

    #[test]
    fn aggregate_recomputes_from_rows() {
        let r = report("d", "a", &[1.0, 2.0, 4.0]);
        let json = r.records_jsonl();
        assert!(!json.contains("wall"));
        let records: Vec<SplitRecord> = json.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let again = RunReport::from_records(records).unwrap();
        assert!((again.aggregate.length_mean - 7.0 / 3.0).abs() < 1e-12);
        assert_eq!(again.aggregate, r.aggregate);
        assert!(r.timings_jsonl().contains("\"wall_ms\":500"));
    }

    #[test]
    fn fixed_benchmark_round_trips_through_files() {
        let data = crate::synthetic::gaussian_linear(200, 3, 1);
        let config = BenchConfig {
            dataset: "gaussian".into(),
            n_splits: 4,
            ..BenchConfig::default()
        };
        let alg = Algorithm::preset("SCP-Ridge").unwrap();
        let report = run_benchmark(&data, &config, &alg).unwrap();
        assert_eq!(report.splits.len(), 4);
        assert!(report.splits.iter().all(|s| (0.0..=1.0).contains(&s.test_coverage)));
        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path()).unwrap();
        let back = RunReport::read(dir.path()).unwrap();
        assert_eq!(back.aggregate, report.aggregate);
        let again = run_benchmark(&data, &BenchConfig { jobs: 2, ..config }, &alg).unwrap();
        assert_eq!(again.records_jsonl(), report.records_jsonl());
    }
}
