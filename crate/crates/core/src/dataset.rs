//! CSV ingestion, normalization and reproducible train/test splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{self, Matrix};
use crate::seed;

/// How labels are rescaled by [`normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScaling {
    /// Divide by the mean absolute label over the fitting rows.
    #[default]
    MeanAbsolute,
    /// Divide by the sample standard deviation of the labels.
    StdDev,
    /// Leave labels untouched.
    None,
}

/// Column statistics recorded by the last [`normalize`] call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub feature_means: Vec<f64>,
    pub feature_scales: Vec<f64>,
    /// Scale applied to labels by this normalization step only.
    pub step_label_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// Multiply normalized labels (and interval endpoints) by this to get original units.
    pub label_scale: f64,
    /// Numeric columns carried alongside but excluded from the features.
    pub side_columns: BTreeMap<String, Vec<f64>>,
    /// Side columns measured in label units (e.g. counterfactual outcomes);
    /// normalization rescales them together with the labels.
    pub label_unit_columns: BTreeSet<String>,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<f64>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                got: labels.len(),
            });
        }
        if labels.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "dataset needs at least 2 rows, got {}",
                labels.len()
            )));
        }
        if features.cols() == 0 {
            return Err(Error::InvalidInput("dataset needs at least one feature".into()));
        }
        if !features.is_finite() || labels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("dataset contains non-finite values".into()));
        }
        let feature_names = (0..features.cols()).map(|j| format!("x{j}")).collect();
        Ok(Dataset {
            features,
            labels,
            feature_names,
            target_name: "y".into(),
            label_scale: 1.0,
            side_columns: BTreeMap::new(),
            label_unit_columns: BTreeSet::new(),
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows `idx` as a new dataset; side columns and scale are carried over.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: matrix::select(&self.labels, idx),
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            label_scale: self.label_scale,
            side_columns: self
                .side_columns
                .iter()
                .map(|(k, v)| (k.clone(), matrix::select(v, idx)))
                .collect(),
            label_unit_columns: self.label_unit_columns.clone(),
            normalization: self.normalization.clone(),
        }
    }

    pub fn label_range(&self) -> f64 {
        let (lo, hi) = self
            .labels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        hi - lo
    }
}

/// Which columns of a CSV file to read.
#[derive(Debug, Clone, Default)]
pub struct CsvColumns {
    /// Target column; the last column when `None`.
    pub target: Option<String>,
    /// Columns kept aside (treatment indicator, counterfactuals) rather than used as features.
    pub side: Vec<String>,
}

pub fn load_csv(path: impl AsRef<Path>, target: Option<&str>) -> Result<Dataset> {
    load_csv_with(
        path,
        &CsvColumns {
            target: target.map(str::to_owned),
            side: Vec::new(),
        },
    )
}

/// Reads a headered numeric CSV. Rows with an empty cell in any used column
/// are dropped (the count is logged); any other unparseable cell is an error.
pub fn load_csv_with(path: impl AsRef<Path>, columns: &CsvColumns) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if headers.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "{}: need at least one feature column and a target",
            path.display()
        )));
    }
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("{}: no column named '{name}'", path.display())))
    };
    let target_idx = match &columns.target {
        Some(name) => find(name)?,
        None => headers.len() - 1,
    };
    let side_idx: Vec<usize> = columns.side.iter().map(|c| find(c)).collect::<Result<_>>()?;
    if side_idx.contains(&target_idx) {
        return Err(Error::InvalidInput("target column also listed as side column".into()));
    }
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|j| *j != target_idx && !side_idx.contains(j))
        .collect();
    if feature_idx.is_empty() {
        return Err(Error::InvalidInput("no feature columns remain".into()));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut side: Vec<Vec<f64>> = vec![Vec::new(); side_idx.len()];
    let mut dropped = 0usize;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        // Data rows are numbered from 1, the header being row 0.
        let row = r + 1;
        let cell = |j: usize| -> Result<Option<f64>> {
            let raw = record.get(j).unwrap_or("");
            if raw.is_empty() {
                return Ok(None);
            }
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Some)
                .ok_or_else(|| Error::Parse {
                    row,
                    column: headers[j].clone(),
                    value: raw.to_owned(),
                })
        };
        let y = cell(target_idx)?;
        let xs: Vec<Option<f64>> = feature_idx.iter().map(|&j| cell(j)).collect::<Result<_>>()?;
        let ss: Vec<Option<f64>> = side_idx.iter().map(|&j| cell(j)).collect::<Result<_>>()?;
        match (y, xs.iter().copied().collect::<Option<Vec<f64>>>(), ss.iter().copied().collect::<Option<Vec<f64>>>()) {
            (Some(y), Some(xs), Some(ss)) => {
                labels.push(y);
                data.extend(xs);
                for (col, v) in side.iter_mut().zip(ss) {
                    col.push(v);
                }
            }
            _ => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} rows with missing cells", path.display());
    }
    if labels.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{}: fewer than 2 complete rows",
            path.display()
        )));
    }
    let n = labels.len();
    let mut ds = Dataset::new(Matrix::from_vec(n, feature_idx.len(), data)?, labels)?;
    ds.feature_names = feature_idx.iter().map(|&j| headers[j].clone()).collect();
    ds.target_name = headers[target_idx].clone();
    ds.side_columns = columns.side.iter().cloned().zip(side).collect();
    Ok(ds)
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn normalize(dataset: &Dataset, fit_on: &[usize]) -> Result<Dataset> {
    normalize_with(dataset, fit_on, LabelScaling::MeanAbsolute)
}

/// Standardizes features and rescales labels using statistics of `fit_on` rows only.
///
/// Side columns listed in `label_unit_columns` are rescaled with the labels.
pub fn normalize_with(dataset: &Dataset, fit_on: &[usize], scaling: LabelScaling) -> Result<Dataset> {
    if fit_on.is_empty() {
        return Err(Error::InvalidInput("normalize: fit_on is empty".into()));
    }
    if let Some(&bad) = fit_on.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::InvalidInput(format!("normalize: row {bad} out of range")));
    }
    let d = dataset.dim();
    let mut means = Vec::with_capacity(d);
    let mut scales = Vec::with_capacity(d);
    for j in 0..d {
        let (m, s) = mean_std(fit_on.iter().map(|&i| dataset.features.get(i, j)));
        means.push(m);
        scales.push(if s > 1e-12 { s } else { 1.0 });
    }
    let step_label_scale = match scaling {
        LabelScaling::MeanAbsolute => {
            fit_on.iter().map(|&i| dataset.labels[i].abs()).sum::<f64>() / fit_on.len() as f64
        }
        LabelScaling::StdDev => mean_std(fit_on.iter().map(|&i| dataset.labels[i])).1,
        LabelScaling::None => 1.0,
    };
    if step_label_scale <= 0.0 || !step_label_scale.is_finite() {
        return Err(Error::InvalidInput(
            "normalize: labels on fit_on are all zero, label scale undefined".into(),
        ));
    }

    let mut features = dataset.features.clone();
    for i in 0..features.rows() {
        for (j, v) in features.row_mut(i).iter_mut().enumerate() {
            let centered = *v - means[j];
            // Constant columns become exactly zero.
            *v = if scales[j] == 1.0 && centered.abs() < 1e-12 { 0.0 } else { centered / scales[j] };
        }
    }
    let labels = dataset.labels.iter().map(|y| y / step_label_scale).collect();
    let side_columns = dataset
        .side_columns
        .iter()
        .map(|(k, v)| {
            let v = if dataset.label_unit_columns.contains(k) {
                v.iter().map(|y| y / step_label_scale).collect()
            } else {
                v.clone()
            };
            (k.clone(), v)
        })
        .collect();
    Ok(Dataset {
        features,
        labels,
        feature_names: dataset.feature_names.clone(),
        target_name: dataset.target_name.clone(),
        label_scale: dataset.label_scale * step_label_scale,
        side_columns,
        label_unit_columns: dataset.label_unit_columns.clone(),
        normalization: Some(Normalization {
            feature_means: means,
            feature_scales: scales,
            step_label_scale,
        }),
    })
}

/// One random train/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// `n_splits` seeded partitions with `round(fraction * n)` training rows each.
pub fn make_splits(n: usize, n_splits: usize, fraction: f64, seed: u64) -> Result<Vec<SplitPlan>> {
    if n < 5 {
        return Err(Error::InsufficientData(format!("make_splits needs n >= 5, got {n}")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidInput(format!("train fraction {fraction} not in (0, 1)")));
    }
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    Ok((0..n_splits)
        .map(|s| {
            let plan_seed = seed::derive_seed(seed, s as u64);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut seed::rng(plan_seed));
            let mut train_indices = perm[..n_train].to_vec();
            let mut test_indices = perm[n_train..].to_vec();
            train_indices.sort_unstable();
            test_indices.sort_unstable();
            SplitPlan {
                seed: plan_seed,
                train_indices,
                test_indices,
            }
        })
        .collect())
}
