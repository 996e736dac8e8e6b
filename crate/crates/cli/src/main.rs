use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use cpsearch::bench::{self, Algorithm, BenchConfig, RunReport};
use cpsearch::cate::{cate_pipeline, ArmPipeline, CateConfig};
use cpsearch::dataset::{load_csv_with, CsvColumns, Dataset, LabelScaling};
use cpsearch::optimizer::SearchConfig;
use cpsearch::{synthetic, Error, Result};

#[derive(Parser)]
#[command(name = "cpsearch", version, about = "Conformal prediction benchmarks with pipeline search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a preset or the pipeline search over repeated train/test splits.
    Bench(BenchArgs),
    /// Compare the two restricted searches against the full search.
    Gain(BenchArgs),
    /// Treatment-effect intervals from two per-arm predictors.
    Cate(CateArgs),
    /// Normalize mean lengths of several `bench` reports per dataset.
    Plotdata(PlotArgs),
}

#[derive(Args)]
struct DataArgs {
    /// CSV path, or `synthetic:<name>[:<rows>]`.
    #[arg(long)]
    data: String,
    /// Target column (defaults to the last column).
    #[arg(long)]
    target: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long = "train-frac", default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scaling {
    MeanAbsolute,
    StdDev,
    None,
}

impl From<Scaling> for LabelScaling {
    fn from(s: Scaling) -> Self {
        match s {
            Scaling::MeanAbsolute => LabelScaling::MeanAbsolute,
            Scaling::StdDev => LabelScaling::StdDev,
            Scaling::None => LabelScaling::None,
        }
    }
}

#[derive(Args)]
struct SearchArgs {
    /// Search configuration TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of acquisition rounds after the initial design.
    #[arg(long)]
    budget: Option<usize>,
    /// Divide expected improvement by predicted evaluation time.
    #[arg(long = "cost-aware")]
    cost_aware: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long, default_value_t = 20)]
    splits: usize,
    /// Concurrent splits (0 = one per core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Fixed pipeline instead of a search.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long = "label-scaling", value_enum, default_value = "mean-absolute")]
    label_scaling: Scaling,
    /// Output directory for report files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    search: SearchArgs,
    /// Binary 0/1 treatment column.
    #[arg(long)]
    treatment: String,
    /// Counterfactual outcome column under control.
    #[arg(long, requires = "y1")]
    y0: Option<String>,
    /// Counterfactual outcome column under treatment.
    #[arg(long, requires = "y0")]
    y1: Option<String>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Report directories written by `bench`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn load(args: &DataArgs, side: Vec<String>) -> Result<(String, Dataset)> {
    if let Some(name) = args.data.strip_prefix("synthetic:") {
        let ds = synthetic::named(name, args.seed).ok_or_else(|| {
            Error::Config(format!(
                "unknown synthetic dataset '{name}'; expected one of {}",
                synthetic::NAMES.join(", ")
            ))
        })?;
        let missing: Vec<&String> = side.iter().filter(|c| !ds.side_columns.contains_key(*c)).collect();
        if !missing.is_empty() {
            return Err(Error::InvalidInput(format!("synthetic '{name}' has no column(s) {missing:?}")));
        }
        return Ok((name.split(':').next().unwrap_or(name).to_string(), ds));
    }
    let path = Path::new(&args.data);
    let columns = CsvColumns {
        target: args.target.clone(),
        side,
    };
    let ds = load_csv_with(path, &columns)?;
    let name = path.file_stem().map_or_else(|| args.data.clone(), |s| s.to_string_lossy().into_owned());
    Ok((name, ds))
}

fn search_config(args: &SearchArgs) -> Result<SearchConfig> {
    let mut cfg = match &args.config {
        Some(path) => SearchConfig::load(path)?,
        None => SearchConfig::default(),
    };
    if let Some(n) = args.budget {
        cfg.budget.n_iter = n;
    }
    cfg.budget.cost_aware |= args.cost_aware;
    cfg.budget.validate()?;
    Ok(cfg)
}

fn bench_config(args: &BenchArgs, dataset: String) -> BenchConfig {
    BenchConfig {
        dataset,
        alpha: args.data.alpha,
        n_splits: args.splits,
        train_frac: args.data.train_frac,
        seed: args.data.seed,
        jobs: args.jobs,
        label_scaling: args.label_scaling.into(),
    }
}

fn write(path: &Path, body: String) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| io_err(dir, source))?;
    }
    std::fs::write(path, body).map_err(|source| io_err(path, source))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn summary(r: &RunReport) -> serde_json::Value {
    json!({
        "dataset": r.dataset,
        "algorithm": r.algorithm,
        "alpha": r.alpha,
        "splits": r.splits.len(),
        "coverage_mean": r.aggregate.coverage_mean,
        "coverage_std": r.aggregate.coverage_std,
        "length_mean": r.aggregate.length_mean,
        "length_std": r.aggregate.length_std,
    })
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Bench(args) => {
            let (name, data) = load(&args.data, Vec::new())?;
            let config = bench_config(&args, name);
            let algorithm = match &args.preset {
                Some(p) => Algorithm::preset(p)?,
                None => Algorithm::Search(search_config(&args.search)?),
            };
            let report = bench::run_benchmark(&data, &config, &algorithm)?;
            report.write(&args.out)?;
            Ok(summary(&report))
        }
        Command::Gain(args) => {
            if args.preset.is_some() {
                return Err(Error::Config("gain always runs searches; drop --preset".into()));
            }
            let (name, data) = load(&args.data, Vec::new())?;
            let config = bench_config(&args, name);
            let gain = bench::run_source_of_gain(&data, &config, &search_config(&args.search)?)?;
            gain.write(&args.out)?;
            Ok(json!([summary(&gain.model_cal), summary(&gain.estimator_cal), summary(&gain.full)]))
        }
        Command::Cate(args) => {
            let mut side = vec![args.treatment.clone()];
            side.extend(args.y0.iter().chain(&args.y1).cloned());
            let (_, mut data) = load(&args.data, side)?;
            data.label_unit_columns.extend(args.y0.iter().chain(&args.y1).cloned());
            let arm = match &args.preset {
                Some(p) => ArmPipeline::Fixed(
                    bench::preset(p).ok_or_else(|| Error::Config(format!("unknown preset '{p}'")))?,
                ),
                None => ArmPipeline::Search(search_config(&args.search)?),
            };
            let config = CateConfig {
                arm,
                treatment: args.treatment,
                counterfactuals: args.y0.zip(args.y1),
                train_frac: args.data.train_frac,
                seed: args.data.seed,
            };
            let report = cate_pipeline(&data, args.data.alpha, &config)?;
            let mut rows = String::from("row,lower,upper,length,flagged\n");
            for (i, iv) in report.test_indices.iter().zip(&report.intervals) {
                rows.push_str(&format!("{i},{},{},{},{}\n", iv.lower, iv.upper, iv.length(), iv.flagged));
            }
            write(&args.out.join("cate_intervals.csv"), rows)?;
            let body = json!({
                "alpha_total": report.alpha_total,
                "arm_alpha": report.arm_alpha,
                "guaranteed_level": report.guaranteed_level,
                "independent_level": report.independent_level,
                "arm_specs": [report.arm_specs.0.to_string(), report.arm_specs.1.to_string()],
                "response_coverage": [report.response_coverage.0, report.response_coverage.1],
                "cate_coverage": report.cate_coverage,
                "mean_length": report.mean_length,
                "test_points": report.intervals.len(),
            });
            write(&args.out.join("cate.json"), format!("{body:#}\n"))?;
            Ok(body)
        }
        Command::Plotdata(args) => {
            let reports = args.reports.iter().map(|d| RunReport::read(d)).collect::<Result<Vec<_>>>()?;
            let rows = bench::emit_plot_data(&reports)?;
            write(&args.out.join("normalized_lengths.csv"), bench::plot_data_csv(&rows))?;
            Ok(json!(rows
                .iter()
                .map(|r| json!({"dataset": r.dataset, "algorithm": r.algorithm, "normalized": r.normalized}))
                .collect::<Vec<_>>()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let message = e.render().to_string();
            eprintln!("{}", json!({"error": "usage", "message": message.trim_end()}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
