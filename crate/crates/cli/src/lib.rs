//! Command-line front end: `evaluate`, `experiment`, `simulate`, `inspect`.
//!
//! Exit codes: 0 ok, 1 configuration error, 2 data error, 3 numerical
//! failure.

mod config;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use qope::inference::infer;
use qope::mean::quantile_average;
use qope::quantile::{Aggregation, EstimatorConfig, Method, QuantileProblem};
use qope::simbench::{
    self, equally_spaced_levels, DgpKind, DgpSpec, ExperimentConfig, ExperimentReport, Noise,
};
use qope::{
    classic_dr_mean, fit_nuisances, Dataset, Error, GbdtConfig, KernelSpec, MdnConfig,
    NuisanceConfig, OutcomeSource, Policy, PropensitySource, QuantileGrid, RngStream,
};

pub use config::KeyValues;

/// Failure carrying the process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn error_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => 1,
        Error::InvalidData(_) | Error::Parse { .. } | Error::Csv(_) | Error::Io(_) => 2,
        Error::Numerical(_) | Error::Contract(_) => 3,
        Error::AtLevel { source, .. } => error_code(source),
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            code: error_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "qope",
    version,
    about = "Doubly-robust quantile off-policy evaluation"
)]
pub struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate quantiles and means of a target policy's cumulative reward.
    Evaluate(EvaluateArgs),
    /// Run a named experiment preset over the synthetic designs.
    Experiment(ExperimentArgs),
    /// Write a synthetic dataset as CSV.
    Simulate(SimulateArgs),
    /// Print a dataset summary.
    Inspect(InspectArgs),
}

/// Estimator settings shared by `evaluate` and `experiment`.
#[derive(Debug, Clone, Default, Args)]
pub struct EstimatorArgs {
    /// Flat key=value file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cross-fitting folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Roll-out draws per action.
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// `pooled` or `per-fold`.
    #[arg(long)]
    pub aggregation: Option<String>,
    /// Fixed bandwidth or `scott`.
    #[arg(long)]
    pub bandwidth: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Midpoint grid size for the quantile-average mean.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub components: Option<usize>,
    /// Hidden widths, comma separated.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub gbdt_rounds: Option<usize>,
    #[arg(long)]
    pub gbdt_depth: Option<usize>,
    /// Propensity clipping floor.
    #[arg(long)]
    pub clip: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub est: EstimatorArgs,
    /// Input dataset (CSV).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthetic design instead of a dataset: `single` or `two`.
    #[arg(long)]
    pub dgp: Option<String>,
    /// Noise degrees of freedom or `normal`.
    #[arg(long)]
    pub df: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Comma-separated levels.
    #[arg(long)]
    pub taus: Option<String>,
    /// `dm`, `ipw` or `dr`.
    #[arg(long)]
    pub method: Option<String>,
    /// Skip density and variance estimation.
    #[arg(long)]
    pub no_inference: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    /// table1, table2, coverage, bandwidth, methods or fig3.
    pub preset: String,
    #[command(flatten)]
    pub est: EstimatorArgs,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Comma-separated noise list (degrees of freedom or `normal`).
    #[arg(long)]
    pub dfs: Option<String>,
    #[arg(long)]
    pub taus: Option<String>,
    /// Draws behind each oracle quantile.
    #[arg(long)]
    pub oracle_draws: Option<usize>,
    /// Use the larger full-scale replicate counts.
    #[arg(long)]
    pub full_scale: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value = "single")]
    pub dgp: String,
    #[arg(long, default_value = "3")]
    pub df: String,
    #[arg(long, default_value_t = 2500)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub data: PathBuf,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<T>()
                .map_err(|e| CliError::config(format!("bad {what} `{t}`: {e}")))
        })
        .collect()
}

/// Settings after merging the config file and flags.
struct Resolved {
    file: KeyValues,
    seed: u64,
    estimator: EstimatorConfig,
    kernel: KernelSpec,
    alpha: f64,
    grid: QuantileGrid,
    out: PathBuf,
    header: Vec<(String, String)>,
}

fn resolve_estimator(
    a: &EstimatorArgs,
    default_aggregation: Aggregation,
) -> Result<Resolved, CliError> {
    let file = match &a.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    let seed = file.resolve(a.seed, "seed")?.unwrap_or(0);
    let mut mdn = MdnConfig::default();
    if let Some(e) = file.resolve(a.epochs, "epochs")? {
        mdn.epochs = e;
    }
    if let Some(c) = file.resolve(a.components, "components")? {
        mdn.components = c;
    }
    if let Some(h) = file.resolve(a.hidden.clone(), "hidden")? {
        mdn.hidden = parse_list(&h, "hidden width")?;
    }
    if let Some(lr) = file.resolve(a.learning_rate, "learning-rate")? {
        mdn.learning_rate = lr;
    }
    let mut gbdt = GbdtConfig::default();
    if let Some(r) = file.resolve(a.gbdt_rounds, "gbdt-rounds")? {
        gbdt.rounds = r;
    }
    if let Some(d) = file.resolve(a.gbdt_depth, "gbdt-depth")? {
        gbdt.max_depth = d;
    }
    if let Some(c) = file.resolve(a.clip, "clip")? {
        gbdt.clip_floor = c;
    }
    let mut nuisance = NuisanceConfig {
        propensity: PropensitySource::Gbdt(gbdt.clone()),
        outcome: OutcomeSource::Mdn(mdn.clone()),
        ..NuisanceConfig::default()
    };
    if let Some(s) = file.resolve(a.folds, "folds")? {
        nuisance.num_folds = s;
    }
    if let Some(m) = file.resolve(a.mc_samples, "mc-samples")? {
        nuisance.mc_samples = m;
    }
    let aggregation = match file
        .resolve(a.aggregation.clone(), "aggregation")?
        .as_deref()
    {
        None => default_aggregation,
        Some("pooled") => Aggregation::Pooled,
        Some("per-fold") | Some("per-fold-average") => Aggregation::PerFoldAverage,
        Some(other) => {
            return Err(CliError::config(format!(
                "unknown aggregation `{other}` (pooled, per-fold)"
            )))
        }
    };
    let estimator = EstimatorConfig {
        aggregation,
        nuisance,
        ..EstimatorConfig::default()
    };
    let bandwidth = file
        .resolve(a.bandwidth.clone(), "bandwidth")?
        .unwrap_or_else(|| "0.15".into());
    let kernel = if bandwidth == "scott" {
        KernelSpec::scott()
    } else {
        KernelSpec::fixed(bandwidth.parse().map_err(|_| {
            CliError::config(format!(
                "bandwidth must be a number or `scott`, got `{bandwidth}`"
            ))
        })?)
    };
    let alpha = file.resolve(a.alpha, "alpha")?.unwrap_or(0.05);
    let g = file.resolve(a.grid, "grid")?.unwrap_or(99);
    let grid = QuantileGrid::midpoint(g)?;
    let out = file
        .resolve(a.out.clone(), "out")?
        .unwrap_or_else(|| PathBuf::from("."));
    let header = vec![
        ("seed".to_string(), seed.to_string()),
        ("folds".into(), estimator.nuisance.num_folds.to_string()),
        (
            "mc_samples".into(),
            estimator.nuisance.mc_samples.to_string(),
        ),
        ("aggregation".into(), format!("{aggregation:?}")),
        ("bandwidth".into(), bandwidth),
        ("alpha".into(), alpha.to_string()),
        ("grid".into(), g.to_string()),
        ("mdn".into(), format!("{mdn:?}")),
        ("gbdt".into(), format!("{gbdt:?}")),
    ];
    Ok(Resolved {
        file,
        seed,
        estimator,
        kernel,
        alpha,
        grid,
        out,
        header,
    })
}

fn write_with_header(
    path: &Path,
    header: &[(String, String)],
    rows: &[Vec<String>],
) -> Result<(), CliError> {
    let mut f = fs::File::create(path)
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))?;
    for (k, v) in header {
        writeln!(f, "# {k}={v}")?;
    }
    let mut w = csv::Writer::from_writer(f);
    for r in rows {
        w.write_record(r)
            .map_err(|e| CliError::data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::config(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<String, CliError> {
    let r = resolve_estimator(&a.est, Aggregation::Pooled)?;
    let file = &r.file;
    let taus: Vec<f64> = match (file.resolve(a.tau, "tau")?, file.resolve(a.taus.clone(), "taus")?) {
        (Some(_), Some(_)) => return Err(CliError::config("give either --tau or --taus, not both")),
        (Some(t), None) => vec![t],
        (None, Some(list)) => parse_list(&list, "quantile level")?,
        (None, None) => {
            return Err(CliError::config(
                "missing quantile level\n\nusage: qope evaluate (--data FILE | --dgp single|two --df DF --n N) (--tau T | --taus T1,T2,...) [--method dm|ipw|dr]",
            ))
        }
    };
    if taus.is_empty() {
        return Err(CliError::config("--taus is empty"));
    }
    let method: Method = file
        .resolve(a.method.clone(), "method")?
        .unwrap_or_else(|| "dr".into())
        .parse()?;
    let data_path = file.resolve(a.data.clone(), "data")?;
    let dgp = file.resolve(a.dgp.clone(), "dgp")?;
    let mut header = r.header.clone();
    let rng = RngStream::new(r.seed);
    let dataset = match (data_path, dgp) {
        (Some(_), Some(_)) => {
            return Err(CliError::config("give either --data or --dgp, not both"))
        }
        (None, None) => return Err(CliError::config("one of --data or --dgp is required")),
        (Some(p), None) => {
            header.push(("data".into(), p.display().to_string()));
            let f = fs::File::open(&p)
                .map_err(|e| CliError::data(format!("cannot open {}: {e}", p.display())))?;
            Dataset::read_csv(f, None)?
        }
        (None, Some(kind)) => {
            let kind: DgpKind = kind.parse()?;
            let noise: Noise = file
                .resolve(a.df.clone(), "df")?
                .unwrap_or_else(|| "3".into())
                .parse()?;
            let n = file.resolve(a.n, "n")?.unwrap_or(2500);
            header.push(("dgp".into(), kind.name().into()));
            header.push(("df".into(), noise.label()));
            header.push(("n".into(), n.to_string()));
            simbench::generate(&DgpSpec::new(kind, noise, n, r.seed), &rng.fork("data"))?
        }
    };
    header.push(("method".into(), method.name().into()));
    let inference = !a.no_inference && !matches!(file.get("no-inference"), Some("true"));
    let mut est_cfg = r.estimator.clone();
    est_cfg.nuisance.density_models = inference && method != Method::Ipw;
    est_cfg.nuisance.validate(dataset.horizon())?;
    let target: Policy = Policy::sign_of_first_covariate();
    header.push(("target".into(), "first covariate > 0".into()));
    let bundle = fit_nuisances(&dataset, &target, &est_cfg.nuisance, &rng.fork("fit"))?;
    let problem = QuantileProblem::new(&bundle, method)?;
    let mut rows = vec![
        ["tau", "eta_hat", "j0", "sigma", "ci_lo", "ci_hi", "method"]
            .map(String::from)
            .to_vec(),
    ];
    let mut estimates = problem.solve_many(&taus, &est_cfg)?;
    for est in &mut estimates {
        let inf = if inference {
            Some(infer(&dataset, &bundle, &problem, est, &r.kernel, r.alpha)?)
        } else {
            None
        };
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        rows.push(vec![
            est.tau.to_string(),
            est.eta_hat.to_string(),
            opt(inf.as_ref().map(|i| i.j0_used)),
            opt(inf.as_ref().map(|i| i.sigma2.sqrt())),
            opt(inf.as_ref().map(|i| i.ci.0)),
            opt(inf.as_ref().map(|i| i.ci.1)),
            method.name().into(),
        ]);
    }
    let dr = if method == Method::Dr {
        problem
    } else {
        QuantileProblem::new(&bundle, Method::Dr)?
    };
    let rq = quantile_average(&dr, &r.grid, &est_cfg, false)?;
    let rm = classic_dr_mean(&bundle);
    ensure_dir(&r.out)?;
    write_with_header(&r.out.join("quantiles.csv"), &header, &rows)?;
    write_with_header(
        &r.out.join("mean.csv"),
        &header,
        &[
            vec!["Rquantile".into(), "Rmean".into()],
            vec![rq.value.to_string(), rm.to_string()],
        ],
    )?;
    let mut msg = String::new();
    for row in &rows {
        msg.push_str(&row.join("\t"));
        msg.push('\n');
    }
    msg.push_str(&format!("Rquantile={} Rmean={}\n", rq.value, rm));
    Ok(msg)
}

/// Replicate counts per preset: (desk scale, full scale).
fn preset_replicates(preset: &str) -> (usize, usize) {
    match preset {
        "table1" | "table2" => (100, 100),
        "coverage" => (200, 500),
        "bandwidth" => (100, 500),
        "methods" => (50, 100),
        _ => (1, 1),
    }
}

fn cmd_experiment(a: &ExperimentArgs) -> Result<String, CliError> {
    let r = resolve_estimator(&a.est, Aggregation::PerFoldAverage)?;
    let file = &r.file;
    let (desk, full) = preset_replicates(&a.preset);
    let replicates = file
        .resolve(a.replicates, "replicates")?
        .unwrap_or(if a.full_scale { full } else { desk });
    if replicates == 0 {
        return Err(CliError::config("--replicates must be >= 1"));
    }
    let mut cfg = ExperimentConfig {
        seed: r.seed,
        estimator: r.estimator.clone(),
        grid: r.grid.clone(),
        kernel: r.kernel,
        alpha: r.alpha,
        ..ExperimentConfig::default()
    };
    if let Some(n) = file.resolve(a.n, "n")? {
        cfg.n = n;
    }
    if let Some(d) = file.resolve(a.oracle_draws, "oracle-draws")? {
        cfg.oracle_draws = d;
    }
    let dfs = file
        .resolve(a.dfs.clone(), "dfs")?
        .map(|s| parse_list::<Noise>(&s, "noise"))
        .transpose()?;
    let taus = file
        .resolve(a.taus.clone(), "taus")?
        .map(|s| parse_list::<f64>(&s, "quantile level"))
        .transpose()?;
    let single = |default_df: f64| {
        let noise = dfs
            .as_ref()
            .and_then(|d| d.first().copied())
            .unwrap_or(Noise::StudentT(default_df));
        DgpSpec::new(DgpKind::SingleStage, noise, cfg.n, cfg.seed)
    };
    let quartiles = vec![0.25, 0.5, 0.75];
    let report: ExperimentReport = match a.preset.as_str() {
        "table1" => simbench::run_mse_experiment(
            "table1",
            DgpKind::SingleStage,
            &dfs.clone().unwrap_or_else(simbench::table1_noises),
            replicates,
            &cfg,
        )?,
        "table2" => simbench::run_mse_experiment(
            "table2",
            DgpKind::TwoStage,
            &dfs.clone().unwrap_or_else(simbench::table2_noises),
            replicates,
            &cfg,
        )?,
        "coverage" => simbench::run_coverage_experiment(
            "coverage",
            &single(3.0),
            &taus.clone().unwrap_or(quartiles),
            replicates,
            &cfg,
        )?,
        "bandwidth" => {
            let kernels = [
                KernelSpec::fixed(0.10),
                KernelSpec::fixed(0.15),
                KernelSpec::fixed(0.20),
                KernelSpec::scott(),
                KernelSpec::fixed(10.0),
            ];
            simbench::run_bandwidth_sweep(
                "bandwidth",
                &kernels,
                &single(3.0),
                &taus.clone().unwrap_or(quartiles),
                replicates,
                &cfg,
            )?
        }
        "methods" => simbench::run_method_comparison(
            "methods",
            &single(4.0),
            &taus
                .clone()
                .unwrap_or_else(|| (1..=9).map(|i| i as f64 / 10.0).collect()),
            replicates,
            &cfg,
        )?,
        "fig3" => simbench::fig3(
            "fig3",
            &single(3.0),
            &taus.clone().unwrap_or_else(|| equally_spaced_levels(20)),
            &cfg,
        )?,
        other => {
            return Err(CliError::config(format!(
                "unknown experiment `{other}` (table1, table2, coverage, bandwidth, methods, fig3)"
            )))
        }
    };
    ensure_dir(&r.out)?;
    let paths = report.write_dir(&r.out)?;
    let mut msg = report.summary_table();
    for p in paths {
        msg.push_str(&format!("wrote {}\n", p.display()));
    }
    Ok(msg)
}

fn cmd_simulate(a: &SimulateArgs) -> Result<String, CliError> {
    let kind: DgpKind = a.dgp.parse()?;
    let noise: Noise = a.df.parse()?;
    let ds = simbench::generate(
        &DgpSpec::new(kind, noise, a.n, a.seed),
        &RngStream::new(a.seed).fork("data"),
    )?;
    match &a.out {
        Some(p) => {
            let f = fs::File::create(p)
                .map_err(|e| CliError::config(format!("cannot write {}: {e}", p.display())))?;
            ds.write_csv(f)?;
            Ok(format!("wrote {} subjects to {}\n", ds.len(), p.display()))
        }
        None => {
            let mut buf = Vec::new();
            ds.write_csv(&mut buf)?;
            Ok(String::from_utf8(buf).map_err(|e| CliError::data(e.to_string()))?)
        }
    }
}

fn cmd_inspect(a: &InspectArgs) -> Result<String, CliError> {
    let f = fs::File::open(&a.data)
        .map_err(|e| CliError::data(format!("cannot open {}: {e}", a.data.display())))?;
    let ds = Dataset::read_csv(f, None)?;
    let mut s = format!(
        "subjects={} stages={} actions={} covariate_dims={:?}\n",
        ds.len(),
        ds.horizon(),
        ds.num_actions(),
        ds.covariate_dims()
    );
    for k in 1..=ds.horizon() {
        let mut counts = vec![0usize; ds.num_actions()];
        let mut rewards: Vec<f64> = Vec::with_capacity(ds.len());
        for t in ds.trajectories() {
            counts[t.stages[k - 1].action] += 1;
            rewards.push(t.stages[k - 1].reward);
        }
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        rewards.sort_by(f64::total_cmp);
        s.push_str(&format!(
            "stage {k}: action counts {:?}, reward mean {mean:.4}, median {:.4}, min {:.4}, max {:.4}\n",
            counts,
            rewards[rewards.len() / 2],
            rewards[0],
            rewards[rewards.len() - 1]
        ));
    }
    let total = ds.cumulative_rewards();
    s.push_str(&format!(
        "cumulative reward mean {:.4}\n",
        total.iter().sum::<f64>() / total.len() as f64
    ));
    Ok(s)
}

fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(t) = threads {
        if t == 0 {
            return Err(CliError::config("--threads must be >= 1"));
        }
        if rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .is_err()
        {
            log::debug!("thread pool already initialised");
        }
    }
    Ok(())
}

/// Runs a parsed command and returns its stdout text.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    init_threads(cli.threads)?;
    match &cli.command {
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

/// Parses `args` (program name first), runs, prints, and returns the exit
/// code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
