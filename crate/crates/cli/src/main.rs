//! `rwdre`: simulate, evaluate and analyze random walks in exclusion
//! environments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod analyze;
mod config;
mod output;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rwdre::decomposition::DecompositionError;
use rwdre::dynamics::{torus_sensitivity, DynamicsError};
use rwdre::oracle::{entropy_curve, OracleError};
use rwdre::stats::{run_ensemble, RunFailure, StatsError};
use rwdre::theory::{z_variance, LimitVariance, RateStatistics, TheoryError};
use serde::Serialize;
use thiserror::Error;

use crate::config::{Config, ConfigError, Overrides, RawConfig, RawModel, RawRun};
use crate::output::{
    residual_rows, trajectory_rows, Header, ManifestFile, RunManifest, Telemetry, MANIFEST_FILE,
    RESIDUAL_FILE, TRAJECTORY_FILE,
};

/// Relative identity defect above which a run is reported as inconsistent.
const IDENTITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "rwdre", version, about = "Random walks driven by exclusion processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an ensemble and write trajectories, residuals and a manifest.
    Simulate(SimulateArgs),
    /// Print speed, noise coefficient and limiting variances as JSON.
    Theory(TheoryArgs),
    /// Exact relative entropy on a small torus, as CSV.
    Oracle(OracleArgs),
    /// Summarize trajectory output.
    Analyze(AnalyzeArgs),
    /// Compare displacement variance at kappa and 2·kappa.
    TorusCheck(TorusArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, env = "RWDRE_CONFIG")]
    config: PathBuf,
    #[arg(long, env = "RWDRE_RUNS")]
    runs: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, env = "RWDRE_WORKERS")]
    workers: Option<usize>,
    #[arg(long, env = "RWDRE_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "RWDRE_OUT", default_value = "rwdre-out")]
    out: PathBuf,
    #[arg(long, env = "RWDRE_BUDGET_EVENTS")]
    budget_events: Option<f64>,
}

/// Model selection for subcommands that accept either a config file or a
/// preset given inline.
#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long, env = "RWDRE_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    diffusivity: Option<f64>,
}

#[derive(Debug, Args)]
struct TheoryArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Times at which to evaluate `Var(Z_t)`.
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 1.0])]
    times: Vec<f64>,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Torus size.
    #[arg(long = "L", default_value_t = 6)]
    lattice_size: usize,
    /// Scaling parameters to evaluate.
    #[arg(long = "n", value_delimiter = ',', default_values_t = [1, 2, 4])]
    ns: Vec<u32>,
    /// Time grid; defaults to k/20 for k = 0..=20.
    #[arg(long, value_delimiter = ',')]
    times: Option<Vec<f64>>,
    #[arg(long, env = "RWDRE_OUT")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Trajectory JSONL written by `simulate`.
    #[arg(long)]
    input: PathBuf,
    /// Residual JSONL written by `simulate`; repeat to pool several runs.
    #[arg(long)]
    residuals: Vec<PathBuf>,
    /// Directory for report.json and the CSV tables; stdout if absent.
    #[arg(long, env = "RWDRE_OUT")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TorusArgs {
    #[arg(long, env = "RWDRE_CONFIG")]
    config: PathBuf,
    #[arg(long, env = "RWDRE_RUNS", default_value_t = 400)]
    runs: u64,
    #[arg(long, env = "RWDRE_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "RWDRE_BUDGET_EVENTS")]
    budget_events: Option<f64>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run {run}: {reason}")]
    Budget { run: u64, reason: String },
    #[error("internal consistency: {0}")]
    Consistency(String),
    #[error(transparent)]
    Analyze(#[from] analyze::AnalyzeError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Oracle(OracleError),
    #[error(transparent)]
    Stats(StatsError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Setup(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(ConfigError::Budget { .. }) | CliError::Budget { .. } => 3,
            CliError::Config(_) | CliError::Analyze(_) | CliError::Theory(_) => 2,
            CliError::Oracle(OracleError::Params(DynamicsError::BudgetExceeded { .. })) => 3,
            CliError::Oracle(_) => 2,
            CliError::Consistency(_) => 4,
            CliError::Stats(_) | CliError::Io { .. } | CliError::Setup(_) => 1,
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::Run { run, seed, source } => match source {
                RunFailure::Dynamics(DynamicsError::BudgetExceeded { .. }) => CliError::Budget {
                    run,
                    reason: source.to_string(),
                },
                RunFailure::Dynamics(DynamicsError::ParticleLoss { .. })
                | RunFailure::Decomposition(DecompositionError::IdentityBreach { .. }) => {
                    CliError::Consistency(format!("run {run}: {source}"))
                }
                other => CliError::Stats(StatsError::Run {
                    run,
                    seed,
                    source: other,
                }),
            },
            other => CliError::Stats(other),
        }
    }
}

fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

fn read_config(path: &Path, overrides: Overrides) -> Result<Config, CliError> {
    let text = fs::read_to_string(path).map_err(io(format!("cannot read {}", path.display())))?;
    Ok(Config::parse(&text, overrides)?)
}

impl ModelArgs {
    /// A config from the file, or from the inline preset with `n = 1` and
    /// `T = horizon`.
    fn resolve(&self, horizon: f64, lattice_size: Option<usize>) -> Result<Config, CliError> {
        let mut config = match &self.config {
            Some(path) => read_config(path, Overrides::default())?,
            None => Config::resolve(
                RawConfig {
                    model: RawModel {
                        preset: Some(self.preset.clone().unwrap_or_else(|| "warmup".into())),
                        alpha: Some(self.alpha),
                        beta: Some(self.beta),
                        diffusivity: self.diffusivity,
                        ..Default::default()
                    },
                    run: RawRun {
                        n: Some(1),
                        rho: Some(self.rho.unwrap_or(0.5)),
                        horizon: Some(horizon),
                        lattice_size,
                        ..Default::default()
                    },
                    probes: Vec::new(),
                },
                Overrides::default(),
            )?,
        };
        if self.config.is_some() {
            if let Some(rho) = self.rho {
                config.run.rho = rho;
            }
            if let Some(d) = self.diffusivity {
                config.model.diffusivity = d;
            }
            if lattice_size.is_some() {
                config.run.lattice_size = lattice_size;
            }
            // Re-validate after the overrides.
            config = Config::parse(&config.canonical_toml(), Overrides::default())?;
        }
        Ok(config)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io(format!("cannot write {}", path.display())))
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let config = read_config(
        &args.config,
        Overrides {
            runs: args.runs,
            seed: args.seed,
            budget_events: args.budget_events,
        },
    )?;
    let params = config.params()?;
    let manifest = RunManifest::new(&config);
    let manifest_hash = manifest.hash();

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = args.workers {
        pool = pool.num_threads(w);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Setup(format!("cannot start workers: {e}")))?;
    let started = Instant::now();
    let summary = pool.install(|| run_ensemble(&params, config.run.runs))?;
    let wall_clock_seconds = started.elapsed().as_secs_f64();

    let max_relative_defect = summary.max_relative_defect();
    if !(max_relative_defect <= IDENTITY_TOLERANCE) {
        return Err(CliError::Consistency(format!(
            "decomposition identity defect {max_relative_defect:e} exceeds {IDENTITY_TOLERANCE:e}"
        )));
    }

    fs::create_dir_all(&args.out).map_err(io(format!("cannot create {}", args.out.display())))?;
    let header = |kind: &str| Header {
        manifest_hash: manifest_hash.clone(),
        config_hash: manifest.config_hash.clone(),
        kind: kind.to_string(),
        n: summary.n,
        rho: summary.rho,
        speed: summary.speed,
    };
    let write_jsonl = |name: &str, header: Header, rows: &mut dyn Iterator<Item = String>| {
        let path = args.out.join(name);
        let file = fs::File::create(&path).map_err(io(format!("cannot write {}", path.display())))?;
        let mut w = BufWriter::new(file);
        let mut body = || -> std::io::Result<()> {
            writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
            for line in &mut *rows {
                writeln!(w, "{line}")?;
            }
            w.flush()
        };
        body().map_err(io(format!("cannot write {}", path.display())))
    };
    write_jsonl(
        TRAJECTORY_FILE,
        header("trajectory"),
        &mut summary.runs.values().flat_map(|r| {
            trajectory_rows(r, &summary.jumps)
                .map(|row| serde_json::to_string(&row).expect("row serializes"))
        }),
    )?;
    if !config.probes.is_empty() {
        write_jsonl(
            RESIDUAL_FILE,
            header("residual"),
            &mut summary.runs.values().flat_map(|r| {
                residual_rows(r, &summary, &config)
                    .map(|row| serde_json::to_string(&row).expect("row serializes"))
            }),
        )?;
    }
    let events_per_run: Vec<u64> = summary.runs.values().map(|r| r.proposals).collect();
    let file = ManifestFile {
        manifest_hash: manifest_hash.clone(),
        telemetry: Telemetry {
            workers: pool.current_num_threads(),
            wall_clock_seconds,
            total_events: events_per_run.iter().sum(),
            events_per_run,
            max_relative_defect,
        },
        manifest,
    };
    write_file(
        &args.out.join(MANIFEST_FILE),
        &(serde_json::to_string_pretty(&file).expect("manifest serializes") + "\n"),
    )?;
    eprintln!(
        "wrote {} runs to {} (manifest {manifest_hash})",
        summary.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct VariancePoint {
    t: f64,
    variance: f64,
}

#[derive(Serialize)]
struct TheoryOutput {
    config_hash: String,
    rho: f64,
    v: f64,
    v_prime: f64,
    sigma2: f64,
    diffusivity: f64,
    chi: f64,
    z_variance: Vec<VariancePoint>,
}

fn theory(args: TheoryArgs) -> Result<(), CliError> {
    let config = args.model.resolve(1.0, None)?;
    let params = config.params()?;
    let rates = RateStatistics::compute(&params.walk, params.rho);
    let lv = LimitVariance::new(config.model.diffusivity, params.rho, rates.v)?;
    let z = args
        .times
        .iter()
        .map(|&t| Ok(VariancePoint { t, variance: z_variance(t, &lv)? }))
        .collect::<Result<Vec<_>, TheoryError>>()?;
    let out = TheoryOutput {
        config_hash: config.hash(),
        rho: rates.rho,
        v: rates.v,
        v_prime: rates.v_prime,
        sigma2: rates.sigma2,
        diffusivity: lv.diffusivity,
        chi: lv.chi,
        z_variance: z,
    };
    println!("{}", serde_json::to_string_pretty(&out).expect("output serializes"));
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<(), CliError> {
    let times = args
        .times
        .clone()
        .unwrap_or_else(|| (0..=20).map(|k| k as f64 / 20.0).collect());
    let horizon = times.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let config = args.model.resolve(horizon, Some(args.lattice_size))?;
    let params = config.params()?;
    let curve = entropy_curve(&params, &times, &args.ns).map_err(CliError::Oracle)?;
    let mut csv = format!("# config_hash={}\nn,t,H,H_over_t\n", config.hash());
    for row in &curve.rows {
        csv.push_str(&format!("{},{},{:e},{:e}\n", row.n, row.t, row.entropy, row.rate));
    }
    for (n, sup) in &curve.sup_rate {
        eprintln!("n={n}: sup H/t = {sup:.6}");
    }
    if !curve.decreases.is_empty() {
        eprintln!("H decreased at {} grid points", curve.decreases.len());
    }
    match &args.out {
        Some(path) => write_file(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn analyze_command(args: AnalyzeArgs) -> Result<(), CliError> {
    let input = args.input.to_string_lossy().into_owned();
    let residuals: Vec<String> = args
        .residuals
        .iter()
        .map(|p| p.to_string_lossy().into_owned())
        .collect();
    let report = analyze::analyze(&input, &residuals)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io(format!("cannot create {}", dir.display())))?;
            write_file(&dir.join("report.json"), &json)?;
            write_file(&dir.join("variance_vs_tau.csv"), &analyze::variance_csv(&report))?;
            if let Some(csv) = analyze::hurst_csv(&report) {
                write_file(&dir.join("hurst_fit.csv"), &csv)?;
            }
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn torus_check(args: TorusArgs) -> Result<(), CliError> {
    let config = read_config(
        &args.config,
        Overrides {
            seed: args.seed,
            budget_events: args.budget_events,
            ..Default::default()
        },
    )?;
    let mut params = config.params()?;
    // The doubled torus must also fit the budget.
    params.kappa *= 2.0;
    params.lattice_size = None;
    params.validate().map_err(|e| match e {
        DynamicsError::BudgetExceeded { expected, budget } => {
            CliError::Config(ConfigError::Budget { expected, budget })
        }
        other => CliError::Setup(other.to_string()),
    })?;
    params.kappa = config.run.kappa;
    let speed = rwdre::theory::asymptotic_speed(&params.walk, params.rho);
    let report = torus_sensitivity(&params, args.runs as usize, speed)
        .map_err(|e| CliError::from(StatsError::Run {
            run: 0,
            seed: params.seed,
            source: e.into(),
        }))?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Theory(a) => theory(a),
        Command::Oracle(a) => oracle(a),
        Command::Analyze(a) => analyze_command(a),
        Command::TorusCheck(a) => torus_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
