//! `netinf`: generate networks, simulate experiments, infer topologies and
//! run benchmark grids.
//!
//! Exit codes: 0 success, 1 I/O or file format, 2 invalid parameters,
//! 3 numerical failure.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;
use netinf::eval::{BenchmarkConfig, NetworkSpec, Suite};
use netinf::io::read_json;
use netinf::keb::KebConfig;
use netinf::netsim::NoiseSetting;
use netinf::problem::DEFAULT_TRUNCATION;
use netinf::topology::Method;
use netinf::vi::{BetaExpectation, ViConfig};
use netinf::NetinfError;

use run::{BenchmarkRun, GenerateRun, InferRun, Outcome, RunConfig, SimulateRun};

/// Worker threads for parallel trials and nodes; defaults to all cores.
const THREADS_VAR: &str = "NETINF_THREADS";

#[derive(Parser)]
#[command(name = "netinf", version, about = "Sparse linear dynamical network inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random or ring network; writes model.json and truth.json.
    Generate(GenerateArgs),
    /// Simulate one experiment from a model; writes experiment.csv and its experiment.json sidecar.
    Simulate(SimulateArgs),
    /// Infer the network topology from experiment files; writes network.json.
    Infer(InferArgs),
    /// Run a benchmark grid; writes results.csv (one row per trial) and summary.json.
    Benchmark(BenchmarkArgs),
    /// Re-run a command from its <command>.config.json echo.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Topology {
    Random,
    Ring,
}

#[derive(Args)]
struct GenerateArgs {
    /// Total number of states (random topology).
    #[arg(long, default_value_t = 15)]
    nodes: usize,
    /// Number of measured nodes.
    #[arg(long, default_value_t = 10)]
    observed: usize,
    /// Probability that an entry of A is nonzero, in (0, 1] (random topology).
    #[arg(long, default_value_t = 0.15)]
    density: f64,
    #[arg(long, value_enum, default_value_t = Topology::Random)]
    topology: Topology,
    /// Hidden states in series on each chained ring edge (ring topology).
    #[arg(long, default_value_t = 1)]
    hidden_per_edge: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Model JSON written by `generate`.
    #[arg(long)]
    model: PathBuf,
    /// Number of samples.
    #[arg(long)]
    points: usize,
    /// Signal-to-noise ratio in dB, `none` (inputs only) or `pure-noise` (no inputs).
    #[arg(long, default_value = "none")]
    snr: NoiseSetting,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Vi,
    Keb,
}

#[derive(Args)]
struct InferArgs {
    /// Experiment CSV files (each with its JSON sidecar); repeat for several experiments.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::Vi)]
    method: MethodArg,
    /// Impulse-response truncation length.
    #[arg(long, default_value_t = DEFAULT_TRUNCATION)]
    trunc: usize,
    /// Retained Metropolis-Hastings samples per iteration (vi).
    #[arg(long, default_value_t = 500)]
    mh_samples: usize,
    /// Discarded Metropolis-Hastings samples per iteration (vi).
    #[arg(long, default_value_t = 100)]
    burn_in: usize,
    /// Use adaptive quadrature instead of sampling for the kernel expectations (vi).
    #[arg(long)]
    quadrature: bool,
    /// Iteration cap per candidate structure [default: 50 for vi, 100 for keb].
    #[arg(long)]
    max_iter: Option<usize>,
    /// Relative convergence tolerance [default: 1e-3 for vi, 1e-5 for keb].
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Table1,
    Table2,
    Table3,
    Table4,
    Custom,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Preset grid, or `custom` together with --grid.
    #[arg(long, value_enum)]
    suite: SuiteArg,
    /// Benchmark grid JSON (same layout as the `grid` field of benchmark.config.json).
    #[arg(long, required_if_eq("suite", "custom"))]
    grid: Option<PathBuf>,
    /// Trials per grid cell [default: 20 or the grid file's value].
    #[arg(long)]
    trials: Option<usize>,
    /// Master seed [default: 0 or the grid file's value].
    #[arg(long)]
    seed: Option<u64>,
    /// Override the data lengths, e.g. `--lengths 85` or `--lengths 45,85`.
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    /// Override the methods, e.g. `--methods vi`.
    #[arg(long, value_enum, value_delimiter = ',')]
    methods: Option<Vec<MethodArg>>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    /// A <command>.config.json echo.
    config: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn method(m: MethodArg) -> Method {
    match m {
        MethodArg::Vi => Method::Vi,
        MethodArg::Keb => Method::KebTc,
    }
}

fn resolve(command: Command) -> Result<RunConfig, NetinfError> {
    Ok(match command {
        Command::Generate(a) => RunConfig::Generate(GenerateRun {
            network: match a.topology {
                Topology::Random => NetworkSpec::Random { nodes: a.nodes, observed: a.observed, density: a.density },
                Topology::Ring => NetworkSpec::Ring { observed: a.observed, hidden_per_edge: a.hidden_per_edge },
            },
            seed: a.seed,
            out: a.out,
        }),
        Command::Simulate(a) => {
            RunConfig::Simulate(SimulateRun { model: a.model, points: a.points, noise: a.snr, seed: a.seed, out: a.out })
        }
        Command::Infer(a) => {
            let mut vi = ViConfig { n_mh_samples: a.mh_samples, n_burn_in: a.burn_in, ..Default::default() };
            if a.quadrature {
                vi.beta_expectation = BetaExpectation::Quadrature;
            }
            let mut keb = KebConfig::default();
            if let Some(n) = a.max_iter {
                vi.max_iter = n;
                keb.max_iter = n;
            }
            if let Some(t) = a.tol {
                vi.tol = t;
                keb.tol = t;
            }
            RunConfig::Infer(InferRun { data: a.data, method: method(a.method), trunc: a.trunc, seed: a.seed, vi, keb, out: a.out })
        }
        Command::Benchmark(a) => {
            let mut grid = match (a.suite, &a.grid) {
                (SuiteArg::Custom, Some(path)) => read_json::<BenchmarkConfig>(path)?,
                (SuiteArg::Custom, None) => return Err(NetinfError::Usage("--suite custom needs --grid".into())),
                (s, _) => BenchmarkConfig::preset(match s {
                    SuiteArg::Table1 => Suite::Table1,
                    SuiteArg::Table2 => Suite::Table2,
                    SuiteArg::Table3 => Suite::Table3,
                    _ => Suite::Table4,
                }),
            };
            if let Some(t) = a.trials {
                grid.trials = t;
            }
            if let Some(s) = a.seed {
                grid.seed = s;
            }
            if let Some(l) = a.lengths {
                grid.lengths = l;
            }
            if let Some(m) = a.methods {
                grid.methods = m.into_iter().map(method).collect();
            }
            RunConfig::Benchmark(BenchmarkRun { grid, out: a.out })
        }
        Command::Replay(a) => {
            let mut cfg: RunConfig = read_json(&a.config)?;
            if let Some(out) = a.out {
                cfg.set_out_dir(out);
            }
            cfg
        }
    })
}

fn exit_code(e: &NetinfError) -> u8 {
    match e {
        NetinfError::Io(_) | NetinfError::Json(_) | NetinfError::Csv(_) | NetinfError::Format(_) => 1,
        NetinfError::InvalidParameter { .. }
        | NetinfError::Usage(_)
        | NetinfError::InsufficientData { .. }
        | NetinfError::Generation { .. } => 2,
        NetinfError::Numerical { .. } => 3,
    }
}

fn report(e: &NetinfError) -> String {
    match e {
        NetinfError::InvalidParameter { name, reason } => format!("invalid --{}: {reason}", name.replace('_', "-")),
        other => other.to_string(),
    }
}

fn configure_threads() -> Result<(), NetinfError> {
    let Ok(raw) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| NetinfError::Usage(format!("{THREADS_VAR}=`{raw}` is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| NetinfError::Usage(format!("cannot size the worker pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| resolve(cli.command)).and_then(|cfg| run::execute(&cfg));
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial(msg)) => {
            error!("{msg}");
            ExitCode::from(3)
        }
        Err(e) => {
            error!("{}", report(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
