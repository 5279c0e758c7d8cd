//! Command-line interface.
//!
//! Options may also come from a flat `key = value` file given with `--config`; keys are
//! the long flag names without dashes. Flags on the command line override the file.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::covariance::{estimate_alpha, CovarianceKind, RsmParams, WorkingCovarianceSpec};
use crate::data::{center_x, read_csv, rescale_z, ClusteredDataset};
use crate::error::{Error, Result};
use crate::estimator::Model;
use crate::penalized::{log_grid, select_lambda, SolverOptions};
use crate::penalty::{PenaltyKind, PenaltySpec, DEFAULT_EPSILON, DEFAULT_SCAD_A};
use crate::report::{
    path_entries, write_basis, write_curves, write_report, write_table1, write_table2, CoefficientReport,
    CovarianceReport, PenaltyReport, Report, CURVE_POINTS,
};
use crate::simulation::{run_study, table1_rows, table2_rows, SimConfig, SimMetrics};
use crate::spline::SplineSpace;

#[derive(Debug, Clone, PartialEq, Parser)]
#[command(name = "aplm", version, about = "Spline estimation and variable selection for additive partially linear models")]
#[command(arg_required_else_help = true, args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand)]
pub enum Command {
    /// Unpenalized fit with sandwich standard errors.
    Fit(FitArgs),
    /// Penalized fit with the tuning parameter chosen by BIC.
    Select(SelectArgs),
    /// Monte Carlo study for one design cell.
    Simulate(SimulateArgs),
    /// Selection table over n, working covariance and penalty.
    BenchTable1(BenchArgs),
    /// Standard-error table over n, working covariance and penalty.
    BenchTable2(BenchArgs),
    /// Evaluates a B-spline basis on a grid.
    BasisDump(BasisArgs),
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct ModelArgs {
    /// Input CSV: subject,y,x1..,z1..[,time].
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "wi")]
    pub covariance: CovarianceKind,
    /// Working correlation parameter; estimated from a working-independence fit when omitted.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Declares that the input has a time column (required for rsm).
    #[arg(long)]
    pub with_time: bool,
    #[arg(long)]
    pub rsm_tau2: Option<f64>,
    #[arg(long)]
    pub rsm_nu2: Option<f64>,
    #[arg(long)]
    pub rsm_omega2: Option<f64>,
    /// Spline degree.
    #[arg(long, default_value_t = 3)]
    pub degree: usize,
    /// Number of interior knots.
    #[arg(long, default_value_t = 4)]
    pub knots: usize,
    /// Adds an intercept column to X.
    #[arg(long)]
    pub intercept: bool,
    /// Subtracts pooled column means from X.
    #[arg(long)]
    pub center_x: bool,
    /// Maps each Z column onto [0, 1] by its observed range.
    #[arg(long)]
    pub rescale_z: bool,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Curve CSV path.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "scad")]
    pub penalty: PenaltyKind,
    /// SCAD shape parameter.
    #[arg(long, default_value_t = DEFAULT_SCAD_A)]
    pub a: f64,
    /// LQA ridge on |β|.
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub grid_min: f64,
    #[arg(long, default_value_t = 5.0)]
    pub grid_max: f64,
    #[arg(long, default_value_t = 40)]
    pub grid_size: usize,
    #[arg(long)]
    pub penalize_intercept: bool,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct SimulateArgs {
    /// Number of clusters.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long = "cov", alias = "covariance", default_value = "ex")]
    pub cov: CovarianceKind,
    #[arg(long, default_value = "scad")]
    pub penalty: PenaltyKind,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 20_100_101)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub knots: usize,
    /// Standard deviation of the Gaussian covariates.
    #[arg(long, default_value_t = 0.25)]
    pub x_sd: f64,
    /// Selection-table CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "100,200,400")]
    pub ns: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "ex,ar1,wi")]
    pub covariances: Vec<CovarianceKind>,
    #[arg(long, value_delimiter = ',', default_value = "scad,hard")]
    pub penalties: Vec<PenaltyKind>,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 20_100_101)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.25)]
    pub x_sd: f64,
    /// Table CSV path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct BasisArgs {
    #[arg(long, default_value_t = 3)]
    pub degree: usize,
    #[arg(long, default_value_t = 4)]
    pub knots: usize,
    #[arg(long, default_value_t = CURVE_POINTS)]
    pub points: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Turns `key = value` lines into `--key value` tokens. `#` starts a comment; boolean
/// flags take `true` or `false`.
pub fn config_tokens(text: &str, path: &Path) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Usage(format!("{}:{}: expected key = value", path.display(), no + 1)));
        };
        let (key, value) = (key.trim().trim_start_matches("--"), value.trim());
        if key == "config" {
            return Err(Error::Usage(format!("{}:{}: nested config files are not supported", path.display(), no + 1)));
        }
        match value {
            "true" => tokens.push(format!("--{key}")),
            "false" => {}
            _ => {
                tokens.push(format!("--{key}"));
                tokens.push(value.to_string());
            }
        }
    }
    Ok(tokens)
}

/// Parses argv, splicing in options from `--config FILE` ahead of the explicit flags.
pub fn parse_config<I, S>(argv: I) -> std::result::Result<Cli, ParseFailure>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let config = argv
        .iter()
        .position(|a| a == "--config")
        .and_then(|i| argv.get(i + 1).cloned())
        .or_else(|| argv.iter().find_map(|a| a.strip_prefix("--config=").map(String::from)));
    let argv = match config {
        None => argv,
        Some(file) => {
            let path = PathBuf::from(file);
            let text =
                std::fs::read_to_string(&path).map_err(|source| ParseFailure::Run(Error::Io { path: path.clone(), source }))?;
            let tokens = config_tokens(&text, &path).map_err(ParseFailure::Run)?;
            let mut merged = argv[..2.min(argv.len())].to_vec();
            merged.extend(tokens);
            merged.extend(argv.into_iter().skip(2));
            merged
        }
    };
    Cli::try_parse_from(argv).map_err(ParseFailure::Clap)
}

#[derive(Debug)]
pub enum ParseFailure {
    Clap(clap::Error),
    Run(Error),
}

fn covariance_spec(args: &ModelArgs, dataset: &ClusteredDataset, spaces: &[SplineSpace]) -> Result<(WorkingCovarianceSpec, bool)> {
    let kind = args.covariance;
    if kind == CovarianceKind::Rsm {
        let (Some(tau2), Some(nu2), Some(omega2)) = (args.rsm_tau2, args.rsm_nu2, args.rsm_omega2) else {
            return Err(Error::Usage("rsm needs --rsm-tau2, --rsm-nu2 and --rsm-omega2".into()));
        };
        let alpha = args.alpha.ok_or_else(|| Error::Usage("rsm needs --alpha (serial decay rate)".into()))?;
        return Ok((WorkingCovarianceSpec::rsm(RsmParams { tau2, nu2, omega2 }, alpha), false));
    }
    let (alpha, estimated) = match (kind, args.alpha) {
        (CovarianceKind::Wi, _) => (0.0, false),
        (_, Some(a)) => (a, false),
        (_, None) => {
            let pilot = Model::new(dataset, spaces, &WorkingCovarianceSpec::independence())?;
            (estimate_alpha(kind, &pilot.fit.residuals), true)
        }
    };
    let spec = match kind {
        CovarianceKind::Ex => WorkingCovarianceSpec::exchangeable(alpha),
        CovarianceKind::Ar1 => WorkingCovarianceSpec::ar1(alpha),
        _ => WorkingCovarianceSpec::independence(),
    };
    Ok((spec, estimated))
}

fn check_flags(args: &ModelArgs) -> Result<()> {
    if args.covariance == CovarianceKind::Rsm && !args.with_time {
        return Err(Error::Usage("--covariance rsm requires a time column; pass --with-time".into()));
    }
    if args.degree < 1 {
        return Err(Error::Usage("--degree must be at least 1".into()));
    }
    Ok(())
}

struct Prepared {
    model: Model,
    names: Vec<String>,
    covariance: CovarianceReport,
}

fn prepare(args: &ModelArgs) -> Result<Prepared> {
    check_flags(args)?;
    let mut dataset = read_csv(&args.data)?;
    if args.with_time && !dataset.has_times() {
        return Err(Error::MissingTimes);
    }
    if args.rescale_z {
        dataset = rescale_z(&dataset)?.0;
    }
    let mut names: Vec<String> = (1..=dataset.d1()).map(|k| format!("x{k}")).collect();
    if args.intercept {
        dataset = dataset.with_intercept();
        names.insert(0, "intercept".into());
    }
    if args.center_x {
        dataset = center_x(&dataset).0;
    }
    let space = SplineSpace::new(args.degree, args.knots)?;
    let spaces = vec![space; dataset.d2()];
    let (spec, estimated) = covariance_spec(args, &dataset, &spaces)?;
    let model = Model::new(&dataset, &spaces, &spec)?;
    let covariance = CovarianceReport { kind: spec.kind.name().into(), alpha: spec.alpha, alpha_estimated: estimated };
    Ok(Prepared { model, names, covariance })
}

fn base_report(command: &str, p: &Prepared, curves: Option<&Path>) -> Report {
    let mut r = Report::new(command);
    let fit = &p.model.fit;
    r.covariance = Some(p.covariance.clone());
    r.intercept_shift = Some(fit.intercept_shift);
    r.curves_file = curves.map(|c| c.display().to_string());
    r.diagnostics.n_clusters = p.model.dataset().n();
    r.diagnostics.n_obs = p.model.dataset().n_obs();
    r.diagnostics.hessian_condition = Some(fit.diagnostics.hessian_condition);
    r.diagnostics.spline_eigen_min = Some(fit.diagnostics.spline_eigen_range.0);
    r.diagnostics.spline_eigen_max = Some(fit.diagnostics.spline_eigen_range.1);
    r
}

fn emit(report: &Report, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => write_report(report, path),
        None => {
            let text = serde_json::to_string_pretty(report)
                .map_err(|source| Error::Json { path: PathBuf::from("<stdout>"), source })?;
            println!("{text}");
            Ok(())
        }
    }
}

fn run_fit(args: &FitArgs) -> Result<()> {
    let p = prepare(&args.model)?;
    let fit = &p.model.fit;
    let mut report = base_report("fit", &p, args.model.curves.as_deref());
    report.coefficients = p
        .names
        .iter()
        .enumerate()
        .map(|(k, name)| CoefficientReport { name: name.clone(), estimate: fit.beta_hat[k], se: fit.se[k], active: true })
        .collect();
    report.active_set = (0..p.names.len()).collect();
    if let Some(path) = &args.model.curves {
        write_curves(&fit.curves, path)?;
    }
    emit(&report, args.model.out.as_deref())
}

fn run_select(args: &SelectArgs) -> Result<()> {
    let p = prepare(&args.model)?;
    let grid = log_grid(args.grid_min, args.grid_max, args.grid_size)?;
    let mut penalty = PenaltySpec::new(args.penalty, vec![0.0; p.names.len()]);
    penalty.a = args.a;
    penalty.epsilon = args.epsilon;
    penalty.intercept = p.model.dataset().intercept();
    penalty.penalize_intercept = args.penalize_intercept;
    let (fit, path) = select_lambda(&p.model, &penalty, &grid, &SolverOptions::default())?;
    let mut report = base_report("select", &p, args.model.curves.as_deref());
    report.coefficients = p
        .names
        .iter()
        .enumerate()
        .map(|(k, name)| CoefficientReport {
            name: name.clone(),
            estimate: fit.beta_p[k],
            se: fit.se_p[k],
            active: fit.active_set.contains(&k),
        })
        .collect();
    report.active_set = fit.active_set.clone();
    report.penalty = Some(PenaltyReport {
        kind: args.penalty.name().into(),
        a: args.a,
        epsilon: args.epsilon,
        lambda: fit.lambda_scalar,
        lambda_vector: fit.lambda_vector.clone(),
    });
    report.bic = Some(fit.bic);
    report.lambda_path = path_entries(&path);
    report.diagnostics.iterations = Some(fit.iterations);
    report.diagnostics.converged = Some(fit.converged);
    if let Some(out) = &args.model.curves {
        write_curves(&p.model.curves(&fit.gamma_p)?, out)?;
    }
    emit(&report, args.model.out.as_deref())
}

fn sim_report(command: &str, metrics: Vec<SimMetrics>) -> Report {
    let mut r = Report::new(command);
    r.diagnostics.excluded_replicates = Some(metrics.iter().map(|m| m.excluded).sum());
    r.simulation = metrics;
    r
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let mut config = SimConfig::new(args.n, args.cov, args.penalty);
    config.replicates = args.reps;
    config.seed = args.seed;
    config.interior_knots = args.knots;
    config.x_sd = args.x_sd;
    let metrics = run_study(&config)?;
    if let Some(out) = &args.out {
        write_table1(&table1_rows(&metrics, true), out)?;
    }
    let report = sim_report("simulate", vec![metrics]);
    if args.report.is_some() || args.out.is_none() {
        emit(&report, args.report.as_deref())?;
    }
    Ok(())
}

fn bench(args: &BenchArgs) -> Result<Vec<SimMetrics>> {
    let mut all = Vec::new();
    for &n in &args.ns {
        for &cov in &args.covariances {
            for &penalty in &args.penalties {
                let mut config = SimConfig::new(n, cov, penalty);
                config.replicates = args.reps;
                config.seed = args.seed;
                config.x_sd = args.x_sd;
                log::info!("n = {n}, {} working covariance, {} penalty", cov.name(), penalty.name());
                all.push(run_study(&config)?);
            }
        }
    }
    Ok(all)
}

/// Metrics for the same (n, covariance) share replicates, so the oracle row is emitted once,
/// after the last penalty of each cell.
fn with_oracle_flags(metrics: &[SimMetrics]) -> Vec<(&SimMetrics, bool)> {
    metrics
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let last = metrics.get(i + 1).is_none_or(|next| next.n != m.n || next.covariance != m.covariance);
            (m, last)
        })
        .collect()
}

fn run_bench_table1(args: &BenchArgs) -> Result<()> {
    let metrics = bench(args)?;
    let rows: Vec<_> = with_oracle_flags(&metrics).into_iter().flat_map(|(m, o)| table1_rows(m, o)).collect();
    write_table1(&rows, &args.out)?;
    if let Some(path) = &args.report {
        write_report(&sim_report("bench-table1", metrics), path)?;
    }
    Ok(())
}

fn run_bench_table2(args: &BenchArgs) -> Result<()> {
    let metrics = bench(args)?;
    let rows: Vec<_> = with_oracle_flags(&metrics).into_iter().flat_map(|(m, o)| table2_rows(m, o)).collect();
    write_table2(&rows, &args.out)?;
    if let Some(path) = &args.report {
        write_report(&sim_report("bench-table2", metrics), path)?;
    }
    Ok(())
}

fn run_basis_dump(args: &BasisArgs) -> Result<()> {
    if args.points < 2 {
        return Err(Error::Usage("--points must be at least 2".into()));
    }
    write_basis(&SplineSpace::new(args.degree, args.knots)?, args.points, &args.out)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Select(a) => run_select(a),
        Command::Simulate(a) => run_simulate(a),
        Command::BenchTable1(a) => run_bench_table1(a),
        Command::BenchTable2(a) => run_bench_table2(a),
        Command::BasisDump(a) => run_basis_dump(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        match parse_config(args.iter().copied()) {
            Ok(c) => c,
            Err(e) => panic!("{e:?}"),
        }
    }

    #[test]
    fn fit_with_exchangeable() {
        let cli = parse(&["aplm", "fit", "--data", "d.csv", "--covariance", "ex", "--alpha", "0.9"]);
        let Command::Fit(f) = cli.command else { panic!() };
        assert_eq!(f.model.covariance, CovarianceKind::Ex);
        assert_eq!(f.model.alpha, Some(0.9));
        assert_eq!((f.model.degree, f.model.knots), (3, 4));
    }

    #[test]
    fn defaults_for_select() {
        let Command::Select(s) = parse(&["aplm", "select", "--data", "d.csv"]).command else { panic!() };
        assert_eq!((s.a, s.epsilon, s.grid_size), (3.7, 1e-6, 40));
        assert_eq!(s.penalty, PenaltyKind::Scad);
    }

    #[test]
    fn rsm_without_time_is_usage_error() {
        let Command::Fit(f) = parse(&["aplm", "fit", "--data", "d.csv", "--covariance", "rsm"]).command else { panic!() };
        assert!(matches!(check_flags(&f.model), Err(Error::Usage(_))));
    }

    #[test]
    fn no_arguments_fails() {
        let err = parse_config(["aplm"]).unwrap_err();
        let ParseFailure::Clap(e) = err else { panic!() };
        assert_ne!(e.exit_code(), 0);
    }

    #[test]
    fn unknown_flag_fails() {
        assert!(parse_config(["aplm", "fit", "--data", "d.csv", "--bogus"]).is_err());
    }

    #[test]
    fn config_file_with_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# table run\ndata = d.csv\ncovariance = ar1\nalpha = 0.5\nintercept = true\ncenter-x = false\n").unwrap();
        let p = path.to_str().unwrap();
        let Command::Fit(f) = parse(&["aplm", "fit", "--config", p, "--alpha", "0.2"]).command else { panic!() };
        assert_eq!(f.model.covariance, CovarianceKind::Ar1);
        assert_eq!(f.model.alpha, Some(0.2));
        assert!(f.model.intercept);
        assert!(!f.model.center_x);
    }

    #[test]
    fn malformed_config_line() {
        assert!(config_tokens("alpha 0.5", Path::new("x")).is_err());
    }
}
