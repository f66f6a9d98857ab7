//! Command-line front end: each subcommand reads a panel, runs one pipeline stage and
//! writes plot-ready CSV/JSON artifacts into the output directory.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{load_panel, BaseSpec, InputFormat, MarketPanel, ScalePolicy, DEFAULT_MIN_OBS};
use crate::diagnostics::{market_summaries, residual_independence_check, write_residuals_csv, write_summaries_csv};
use crate::elasticity::{
    elasticity_series, fit_surrogate, write_elasticities_csv, EtaDenominator, LambdaChoice, LassoConfig,
    SurrogateCoefficients,
};
use crate::error::{Error, Result};
use crate::estimator::{estimate_efficiency, EfficiencySeries, KernelConfig};
use crate::mismatch::{cd_mismatch_index, mismatch_series, write_allocations_csv, write_mismatch_csv, MarketState, PlannerStatus};
use crate::simulation::{generate_cd_dgp, run_bias_experiment, DgpConfig, ExperimentConfig, Preset};

#[derive(Debug, Parser)]
#[command(name = "matchkit", version, about = "Nonparametric matching-function and mismatch estimation", args_override_self = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Panel file with columns market_id,period,hires,unemployed,vacancies[,date].
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Directory receiving the artifacts (created if missing).
    #[arg(long, global = true, default_value = ".")]
    pub output_dir: PathBuf,
    /// Input format; inferred from the file extension when omitted.
    #[arg(long, global = true, value_enum)]
    pub format: Option<FormatArg>,
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    /// Worker threads for internal parallelism.
    #[arg(long, global = true, env = "MATCHKIT_THREADS")]
    pub threads: Option<usize>,
    /// Treat solver fallbacks as failures (exit code 4).
    #[arg(long, global = true)]
    pub strict: bool,
    /// Flat key=value file mirroring long flags; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Minimum observations per market for estimation.
    #[arg(long, global = true, default_value_t = DEFAULT_MIN_OBS)]
    pub min_obs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trace the efficiency distribution and recover the efficiency series.
    EstimateEfficiency {
        /// `first` or MARKET:PERIOD.
        #[arg(long, default_value = "first")]
        base: String,
        #[arg(long, default_value_t = 0.01)]
        bandwidth: f64,
        /// Points in the efficiency grid.
        #[arg(long = "a-grid", default_value_t = 201)]
        a_grid: usize,
        /// Sample quantiles of U used as tracing columns.
        #[arg(long = "u-grid", default_value_t = 25)]
        u_grid: usize,
        #[arg(long = "cdf-grid", default_value_t = 512)]
        cdf_grid: usize,
    },
    /// Fit the quadratic surrogate and compute elasticities.
    EstimateElasticity {
        #[arg(long)]
        efficiency: PathBuf,
        /// `cv` or a nonnegative penalty.
        #[arg(long, default_value = "cv")]
        lambda: String,
        /// `au` for ∂m/∂(AU)·AU/H or `u` for ∂m/∂(AU)·U/H.
        #[arg(long, default_value = "au")]
        eta_denominator: String,
        #[arg(long, default_value_t = 0)]
        cv_seed: u64,
    },
    /// Solve the planner problem per period and report the mismatch index.
    Mismatch {
        #[arg(long)]
        efficiency: PathBuf,
        #[arg(long)]
        coeffs: PathBuf,
        /// Also report the Cobb-Douglas index with this unemployment elasticity.
        #[arg(long)]
        cd_sigma: Option<f64>,
        /// Let efficiency enter the Cobb-Douglas index.
        #[arg(long)]
        cd_heterogeneous: bool,
        #[arg(long)]
        dump_allocations: bool,
    },
    /// Run a Monte Carlo experiment on a synthetic panel.
    Simulate {
        #[arg(long, default_value = "recovery")]
        preset: String,
        #[arg(long = "T")]
        t: Option<usize>,
        #[arg(long = "L")]
        l: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        replications: usize,
    },
    /// Residual independence check and market ratios.
    Diagnose {
        #[arg(long)]
        efficiency: PathBuf,
        /// Omit the constant from the diagnostic regressions.
        #[arg(long)]
        no_constant: bool,
    },
}

const SUBCOMMANDS: [&str; 5] = ["estimate-efficiency", "estimate-elasticity", "mismatch", "simulate", "diagnose"];

/// Splice `key=value` lines of a `--config` file into the argument list right after the
/// subcommand, so later explicit flags override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let path = strs.iter().enumerate().find_map(|(i, a)| {
        a.strip_prefix("--config=").map(str::to_string).or_else(|| (a == "--config").then(|| strs.get(i + 1).cloned()).flatten())
    });
    let Some(path) = path else { return Ok(args) };
    let text = fs::read_to_string(&path)?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Schema(format!("config line {} is not key=value", n + 1)))?;
        let (key, value) = (key.trim().trim_start_matches("--"), value.trim());
        if key == "config" {
            continue;
        }
        match value {
            "true" => extra.push(OsString::from(format!("--{key}"))),
            "false" => {}
            _ => extra.push(OsString::from(format!("--{key}={value}"))),
        }
    }
    let pos = strs.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())).map_or(args.len(), |p| p + 1);
    let mut out = args;
    out.splice(pos..pos, extra);
    Ok(out)
}

fn input_panel(g: &GlobalArgs) -> Result<MarketPanel> {
    let path = g.input.as_ref().ok_or_else(|| Error::Validation("--input is required".into()))?;
    let format = match g.format {
        Some(FormatArg::Csv) => InputFormat::Csv,
        Some(FormatArg::Json) => InputFormat::Json,
        None => InputFormat::from_path(path),
    };
    let panel = load_panel(path, format)?;
    log::info!("loaded {} observations in {} markets", panel.len(), panel.markets().len());
    Ok(panel)
}

fn read_efficiency(path: &Path, panel: &MarketPanel) -> Result<EfficiencySeries> {
    EfficiencySeries::read_csv(BufReader::new(File::open(path)?))?.aligned_to(panel)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

/// Execute a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let out = &g.output_dir;
    fs::create_dir_all(out)?;
    match &cli.command {
        Command::EstimateEfficiency { base, bandwidth, a_grid, u_grid, cdf_grid } => {
            let panel = input_panel(g)?;
            panel.require_min_obs(g.min_obs)?;
            let cfg = KernelConfig {
                bandwidth: *bandwidth,
                a_grid_size: *a_grid,
                u_grid_size: *u_grid,
                cdf_grid_size: *cdf_grid,
                ..KernelConfig::default()
            };
            let base: BaseSpec = base.parse()?;
            let est = estimate_efficiency(&panel, &base, ScalePolicy::MeanOne, &cfg)?;
            est.series.write_csv(create(out, "efficiency.csv")?)?;
            write_json(out, "distribution.json", &est.distribution.to_json())?;
            write_json(out, "scale.json", &est.panel.scale().to_json())?;
            if est.series.clipped() > 0 {
                log::warn!("{} efficiency values clipped at the traced range", est.series.clipped());
            }
        }
        Command::EstimateElasticity { efficiency, lambda, eta_denominator, cv_seed } => {
            let raw = input_panel(g)?;
            raw.require_min_obs(g.min_obs)?;
            let panel = raw.normalize_scales(ScalePolicy::MeanOne);
            let series = read_efficiency(efficiency, &panel)?;
            let choice: LambdaChoice = lambda.parse()?;
            let denom: EtaDenominator = eta_denominator.parse()?;
            let cfg = LassoConfig { seed: *cv_seed, ..LassoConfig::default() };
            let coeffs = fit_surrogate(&panel, &series, choice, &cfg)?;
            write_json(out, "coefficients.json", &serde_json::to_value(&coeffs)?)?;
            let eta = elasticity_series(&panel, &series, &coeffs, denom)?;
            write_elasticities_csv(&eta, create(out, "elasticities.csv")?)?;
        }
        Command::Mismatch { efficiency, coeffs, cd_sigma, cd_heterogeneous, dump_allocations } => {
            let panel = input_panel(g)?.normalize_scales(ScalePolicy::MeanOne);
            let series = read_efficiency(efficiency, &panel)?;
            let coeffs: SurrogateCoefficients = serde_json::from_reader(BufReader::new(File::open(coeffs)?))?;
            if let Some(s) = coeffs.scale {
                let p = panel.scale();
                let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
                if rel(s.h, p.h) > 1e-9 || rel(s.u, p.u) > 1e-9 || rel(s.v, p.v) > 1e-9 {
                    log::warn!("coefficients were fitted on data with a different scale record");
                }
            }
            let periods = mismatch_series(&panel, &series, &coeffs)?;
            write_mismatch_csv(&periods, create(out, "mismatch.csv")?)?;
            if *dump_allocations {
                write_allocations_csv(&periods, create(out, "allocations.csv")?)?;
            }
            if let Some(sigma) = cd_sigma {
                // Recovered efficiency multiplies unemployment; its Hicks-neutral equivalent is A^σ.
                let mut w = csv::Writer::from_writer(create(out, "cd_mismatch.csv")?);
                w.write_record(["period", "index"])?;
                for p in periods.iter().filter(|p| p.solution.is_some()) {
                    let states: Vec<MarketState> = p
                        .states
                        .iter()
                        .map(|s| MarketState { a: s.a.powf(*sigma), ..s.clone() })
                        .collect();
                    let m = cd_mismatch_index(&states, *sigma, *cd_heterogeneous)?;
                    w.write_record([p.period.to_string(), m.to_string()])?;
                }
                w.flush()?;
            }
            let fallbacks = periods
                .iter()
                .filter(|p| p.solution.as_ref().is_some_and(|s| s.status == PlannerStatus::NonconcaveFallback))
                .count();
            if g.strict && fallbacks > 0 {
                return Err(Error::SolverFallback { periods: fallbacks });
            }
        }
        Command::Simulate { preset, t, l, seed, replications } => {
            let preset: Preset = preset.parse()?;
            let mut dgp = DgpConfig { seed: *seed, ..preset.config() };
            if let Some(t) = t {
                dgp.t = *t;
            }
            if let Some(l) = l {
                dgp.l = *l;
            }
            let first = generate_cd_dgp(&dgp)?;
            first.panel.write_csv(create(out, "panel.csv")?)?;
            let report = run_bias_experiment(&ExperimentConfig::new(dgp), *replications)?;
            let mut value = serde_json::to_value(&report)?;
            value["preset"] = preset.name().into();
            value["corr_log_a"] = report.rows[0].corr_log_a.into();
            write_json(out, "report.json", &value)?;
            if g.strict && report.rows.iter().any(|r| r.fallback_periods > 0) {
                let periods = report.rows.iter().map(|r| r.fallback_periods).sum();
                return Err(Error::SolverFallback { periods });
            }
        }
        Command::Diagnose { efficiency, no_constant } => {
            let panel = input_panel(g)?;
            let series = read_efficiency(efficiency, &panel)?;
            let check = residual_independence_check(&panel, &series, !no_constant)?;
            write_residuals_csv(&check, create(out, "residuals.csv")?)?;
            write_json(out, "correlation.json", &check.to_json())?;
            write_summaries_csv(&market_summaries(&panel), create(out, "summaries.csv")?)?;
        }
    }
    Ok(())
}

fn error_json(kind: &str, message: &str, code: i32) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message, "exit_code": code } }).to_string()
}

/// Parse arguments, run, and return the process exit code. Failures are reported on
/// stderr as a single JSON object.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("{}", error_json(e.kind(), &e.to_string(), 2));
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", error_json("usage", e.to_string().trim(), 2));
            return 2;
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.global.log_level).format_timestamp(None).try_init();

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.global.threads {
        pool = pool.num_threads(n);
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| execute(&cli)),
        Err(e) => Err(Error::Validation(format!("thread pool: {e}"))),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            log::error!("{e}");
            eprintln!("{}", error_json(e.kind(), &e.to_string(), code));
            code
        }
    }
}
