mod manifest;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use tvcsl::basis::BasisKind;
use tvcsl::bench::{basis_spec, run_grid, write_panel_csvs, BenchGrid, PropensitySpec};
use tvcsl::estimators::{s_lasso_fit, tvcsl_fit, CrossFitPlan, EstimatorConfig, Method};
use tvcsl::heart::{
    compare_fixed_vs_timevarying, ingest_heart, semi_synthetic_study, summary_statistics, verify_checksum,
    CoefRow, Scaling, SemiSyntheticConfig,
};
use tvcsl::simulate::{generate, HazardSpec, SimConfig};
use tvcsl::Dataset;

use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "tvcsl", version, about = "Heterogeneous treatment effects on survival under staggered adoption")]
struct Cli {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic dataset and its true effects.
    Simulate(SimulateArgs),
    /// Fit S-Lasso or TV-CSL to a dataset CSV.
    Fit(FitArgs),
    /// Run a benchmark grid read from TOML.
    Benchmark(BenchmarkArgs),
    /// Analyses of the Stanford heart transplant data.
    AnalyzeHeart(HeartArgs),
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long)]
    seed: u64,
    /// Floor on the adoption rate.
    #[arg(long, default_value_t = 0.05)]
    rate_floor: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum MethodArg {
    SLasso,
    TvCsl,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum BasisArg {
    Linear,
    Complex,
}

impl From<BasisArg> for BasisKind {
    fn from(b: BasisArg) -> Self {
        match b {
            BasisArg::Linear => BasisKind::Linear,
            BasisArg::Complex => BasisKind::Complex,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum PropensityArg {
    Correct,
    Misspecified,
}

impl From<PropensityArg> for PropensitySpec {
    fn from(p: PropensityArg) -> Self {
        match p {
            PropensityArg::Correct => PropensitySpec::Correct,
            PropensityArg::Misspecified => PropensitySpec::Misspecified,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct FitArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long, value_enum, default_value = "linear")]
    eta_basis: BasisArg,
    #[arg(long, value_enum, default_value = "linear")]
    hte_basis: BasisArg,
    /// Ignored by s-lasso.
    #[arg(long, value_enum, default_value = "correct")]
    propensity: PropensityArg,
    /// Cross-fit in one direction only (fold 0 trains, fold 1 applies).
    #[arg(long)]
    single_direction: bool,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct BenchmarkArgs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides `reps` in the grid file.
    #[arg(long)]
    reps: Option<usize>,
    /// Overrides `n` in the grid file; repeatable.
    #[arg(long = "n")]
    n: Vec<usize>,
    /// Overrides `base_seed` in the grid file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `test_size` in the grid file.
    #[arg(long)]
    test_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Analysis {
    Summary,
    Table3,
    Semisynthetic,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ScalingArg {
    Standardized,
    Raw,
}

#[derive(Debug, Args, Serialize)]
struct HeartArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    analysis: Analysis,
    #[arg(long, default_value_t = 25)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Covariate scaling for table3.
    #[arg(long, value_enum, default_value = "standardized")]
    scaling: ScalingArg,
    /// Standardize age and year in the semi-synthetic study.
    #[arg(long)]
    standardize: bool,
    /// Single-direction cross-fitting in the semi-synthetic study.
    #[arg(long)]
    single_direction: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] tvcsl::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("reading {}: {source}", path.display())]
    Input {
        path: PathBuf,
        #[source]
        source: tvcsl::Error,
    },
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

type CliResult<T> = std::result::Result<T, CliError>;

fn input_context(path: &Path) -> impl FnOnce(tvcsl::Error) -> CliError {
    let path = path.to_path_buf();
    move |source| CliError::Input { path, source }
}

fn io_context(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

/// Directory holding an output file; `.` for bare file names.
fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(io_context(format!("creating {}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let s = serde_json::to_string_pretty(value)?;
    std::fs::write(path, s + "\n").map_err(io_context(format!("writing {}", path.display())))
}

/// Manifest plus the directory and files it describes.
type RunOutput = (RunManifest, PathBuf, Vec<PathBuf>);

fn finish(output: RunOutput, threads: Option<usize>, start: Instant) -> CliResult<()> {
    let (mut manifest, dir, files) = output;
    manifest.threads = threads;
    manifest
        .record_outputs(&dir, &files)
        .map_err(io_context("hashing outputs"))?;
    manifest.wall_time_seconds = start.elapsed().as_secs_f64();
    let path = manifest.write(&dir).map_err(io_context("writing manifest"))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn run_simulate(args: &SimulateArgs, argv: Vec<String>) -> CliResult<RunOutput> {
    let spec = HazardSpec::with_rate_floor(args.rate_floor);
    let config = SimConfig {
        spec,
        ..SimConfig::new(args.n as usize, args.seed)
    };
    let dir = parent_dir(&args.out);
    ensure_dir(&dir)?;
    let sim = generate(&config)?;
    sim.dataset.write_csv(&args.out)?;
    let truth = args.out.with_extension("truth.csv");
    sim.write_truth_csv(&truth)?;
    log::info!(
        "{} subjects, {} events, {} with finite adoption time",
        sim.dataset.len(),
        sim.dataset.n_events(),
        sim.dataset.subjects.iter().filter(|s| s.adoption_time.is_finite()).count()
    );
    let manifest = RunManifest::new("simulate", argv, vec![args.seed], serde_json::to_value(args)?);
    Ok((manifest, dir, vec![args.out.clone(), truth]))
}

fn run_fit(args: &FitArgs, argv: Vec<String>) -> CliResult<RunOutput> {
    let data = Dataset::read_csv(&args.data).map_err(input_context(&args.data))?;
    let eta = basis_spec(args.eta_basis.into());
    let hte = basis_spec(args.hte_basis.into());
    let mut config = EstimatorConfig::with_seed(args.seed);
    config.symmetric = !args.single_direction;
    let doc = match args.method {
        MethodArg::SLasso => {
            let fit = s_lasso_fit(&data, eta, hte, &config)?;
            let nonzero = fit.path.selected_beta().iter().filter(|b| **b != 0.0).count();
            json!({
                "method": "s-lasso",
                "n_subjects": data.len(),
                "n_events": data.n_events(),
                "column_names": data.column_names,
                "hte": fit.hte,
                "eta_basis": fit.eta_basis,
                "eta_coef": fit.eta_coef,
                "diagnostics": {
                    "lambda_selected": fit.path.lambda_selected,
                    "selected_index": fit.path.selected_index,
                    "n_lambda": fit.path.lambdas.len(),
                    "nonzero_coefficients": nonzero,
                },
            })
        }
        MethodArg::TvCsl => {
            let plan = CrossFitPlan::new(&data, args.seed)?;
            for &j in &plan.dropped_covariates {
                log::warn!("covariate `{}` dropped: too unbalanced within a fold", data.column_names[j]);
            }
            let subset = PropensitySpec::from(args.propensity).subset(data.p);
            let fit = tvcsl_fit(&data, eta, hte, &subset, &plan, &config)?;
            json!({
                "method": "tv-csl",
                "n_subjects": data.len(),
                "n_events": data.n_events(),
                "column_names": data.column_names,
                "hte": fit.hte,
                "propensity": fit.propensity,
                "diagnostics": {
                    "converged": fit.second_stage.converged,
                    "iterations": fit.second_stage.n_iterations,
                    "gradient_norm": fit.second_stage.gradient_norm,
                    "log_pl": fit.second_stage.log_pl,
                    "centering": fit.centering,
                    "dropped_covariates": fit.plan.dropped_covariates,
                    "first_stage_lambda": fit.first_stage.iter().map(|f| f.path.lambda_selected).collect::<Vec<_>>(),
                },
            })
        }
    };
    let dir = parent_dir(&args.out);
    ensure_dir(&dir)?;
    write_json(&args.out, &doc)?;
    let manifest = RunManifest::new("fit", argv, vec![args.seed], serde_json::to_value(args)?);
    Ok((manifest, dir, vec![args.out.clone()]))
}

fn run_benchmark(args: &BenchmarkArgs, argv: Vec<String>) -> CliResult<RunOutput> {
    let mut grid = BenchGrid::from_path(&args.grid).map_err(input_context(&args.grid))?;
    if let Some(r) = args.reps {
        grid.reps = r;
    }
    if !args.n.is_empty() {
        grid.n = args.n.clone();
    }
    if let Some(s) = args.seed {
        grid.base_seed = s;
    }
    if let Some(t) = args.test_size {
        grid.test_size = t;
    }
    grid.validate()?;
    ensure_dir(&args.out_dir)?;
    let results = run_grid(&grid)?;
    for r in results.iter().filter(|r| r.cell_failed) {
        log::warn!(
            "cell {:?} n={} failed: {} of {} replications failed",
            r.cell.method,
            r.cell.n,
            r.reps_failed,
            r.cell.reps
        );
    }
    let mut files = write_panel_csvs(&results, &args.out_dir)?;
    let summary = args.out_dir.join("summary.json");
    write_json(&summary, &json!({ "grid": grid, "results": results }))?;
    files.push(summary);
    let seeds = (0..grid.reps as u64).map(|r| grid.base_seed.wrapping_add(r)).collect();
    let manifest = RunManifest::new("benchmark", argv, seeds, serde_json::to_value(&grid)?);
    Ok((manifest, args.out_dir.clone(), files))
}

fn write_coef_csv(path: &Path, rows: &[CoefRow]) -> CliResult<()> {
    let mut s = String::from("term,coef,se,p\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.term, r.coef, r.se, r.p));
    }
    std::fs::write(path, s).map_err(io_context(format!("writing {}", path.display())))
}

fn run_heart(args: &HeartArgs, argv: Vec<String>) -> CliResult<RunOutput> {
    if !verify_checksum(&args.data).map_err(input_context(&args.data))? {
        log::warn!("{} does not match the expected checksum", args.data.display());
    }
    let data = ingest_heart(&args.data).map_err(input_context(&args.data))?;
    ensure_dir(&args.out)?;
    let mut files = Vec::new();
    let mut seeds = Vec::new();
    match args.analysis {
        Analysis::Summary => {
            let path = args.out.join("summary.csv");
            let mut s = String::from("variable,mean,sd\n");
            for r in summary_statistics(&data)? {
                s.push_str(&format!("{},{},{}\n", r.variable, r.mean, r.sd));
            }
            std::fs::write(&path, s).map_err(io_context("writing summary.csv"))?;
            files.push(path);
        }
        Analysis::Table3 => {
            let scaling = match args.scaling {
                ScalingArg::Standardized => Scaling::Standardized,
                ScalingArg::Raw => Scaling::Raw,
            };
            let cmp = compare_fixed_vs_timevarying(&data, scaling)?;
            let fixed = args.out.join("table3_fixed.csv");
            let tv = args.out.join("table3_time_varying.csv");
            write_coef_csv(&fixed, &cmp.fixed)?;
            write_coef_csv(&tv, &cmp.time_varying)?;
            files.extend([fixed, tv]);
        }
        Analysis::Semisynthetic => {
            let config = SemiSyntheticConfig {
                reps: args.reps,
                seed: args.seed,
                standardize: args.standardize,
                symmetric: !args.single_direction,
                ..SemiSyntheticConfig::default()
            };
            let report = semi_synthetic_study(&data, &config)?;
            let csv = args.out.join("semisynthetic.csv");
            let mut s = String::from("method,eta_basis,mse_mean,mse_mc_se,reps_ok,reps_failed\n");
            for r in &report.rows {
                let method = match r.method {
                    Method::SLasso => "s-lasso",
                    Method::TvCsl => "tv-csl",
                };
                let basis = match r.eta_basis {
                    BasisKind::Linear => "linear",
                    BasisKind::Complex => "complex",
                };
                s.push_str(&format!(
                    "{method},{basis},{},{},{},{}\n",
                    r.mse_mean, r.mse_mc_se, r.reps_ok, r.reps_failed
                ));
            }
            std::fs::write(&csv, s).map_err(io_context("writing semisynthetic.csv"))?;
            let full = args.out.join("semisynthetic.json");
            write_json(&full, &report)?;
            files.extend([csv, full]);
            seeds = (0..=args.reps as u64).map(|r| args.seed.wrapping_add(r)).collect();
        }
    }
    let manifest = RunManifest::new("analyze-heart", argv, seeds, serde_json::to_value(args)?);
    Ok((manifest, args.out.clone(), files))
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    // Builder::new() does not consult RUST_LOG.
    env_logger::Builder::new()
        .filter_level(level)
        .format(|buf, record| writeln!(buf, "[{}] {}", record.level(), record.args()))
        .init();
}

fn run(cli: Cli, argv: Vec<String>) -> CliResult<()> {
    let start = Instant::now();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        builder = builder.num_threads(t as usize);
    }
    let pool = builder.build()?;
    let threads = cli.threads.map(usize::from);
    pool.install(|| {
        let output = match &cli.command {
            Command::Simulate(a) => run_simulate(a, argv),
            Command::Fit(a) => run_fit(a, argv),
            Command::Benchmark(a) => run_benchmark(a, argv),
            Command::AnalyzeHeart(a) => run_heart(a, argv),
        }?;
        finish(output, threads, start)
    })
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.verbose);
    // Program path varies between installs; record only the arguments.
    let mut recorded = vec!["tvcsl".to_string()];
    recorded.extend(argv.into_iter().skip(1));
    match run(cli, recorded) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
