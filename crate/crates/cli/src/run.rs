//! Resolved run configurations and their execution.
//!
//! Every command is first turned into a [`RunConfig`], which is echoed to
//! `<out>/<command>.config.json` before anything else is written. `replay`
//! feeds such a file straight back into [`execute`].

use std::path::{Path, PathBuf};

use log::info;
use netinf::eval::{run_benchmark, BenchmarkConfig, NetworkSpec};
use netinf::io::{read_experiment, read_json, write_experiment, write_json, write_trials_csv};
use netinf::keb::{KebConfig, KebScorer};
use netinf::netsim::{derive_dsf_structure, simulate, NoiseSetting, StateSpaceModel};
use netinf::topology::{infer_network, InferredNetwork, Method, StructureScorer, TopologyConfig, VariationalScorer};
use netinf::vi::ViConfig;
use netinf::{NetinfError, Result};
use serde::{Deserialize, Serialize};

pub const MODEL_FILE: &str = "model.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const EXPERIMENT_FILE: &str = "experiment.csv";
pub const NETWORK_FILE: &str = "network.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRun {
    pub network: NetworkSpec,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateRun {
    pub model: PathBuf,
    pub points: usize,
    pub noise: NoiseSetting,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRun {
    pub data: Vec<PathBuf>,
    pub method: Method,
    pub trunc: usize,
    pub seed: u64,
    pub vi: ViConfig,
    pub keb: KebConfig,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRun {
    pub grid: BenchmarkConfig,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    Generate(GenerateRun),
    Simulate(SimulateRun),
    Infer(InferRun),
    Benchmark(BenchmarkRun),
}

impl RunConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RunConfig::Generate(_) => "generate",
            RunConfig::Simulate(_) => "simulate",
            RunConfig::Infer(_) => "infer",
            RunConfig::Benchmark(_) => "benchmark",
        }
    }

    pub fn out_dir(&self) -> &Path {
        match self {
            RunConfig::Generate(r) => &r.out,
            RunConfig::Simulate(r) => &r.out,
            RunConfig::Infer(r) => &r.out,
            RunConfig::Benchmark(r) => &r.out,
        }
    }

    pub fn set_out_dir(&mut self, dir: PathBuf) {
        match self {
            RunConfig::Generate(r) => r.out = dir,
            RunConfig::Simulate(r) => r.out = dir,
            RunConfig::Infer(r) => r.out = dir,
            RunConfig::Benchmark(r) => r.out = dir,
        }
    }

    pub fn echo_path(&self) -> PathBuf {
        self.out_dir().join(format!("{}.config.json", self.name()))
    }
}

/// What a finished command reports back to `main`.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Done,
    /// Outputs were written but some part of the run failed numerically.
    Partial(String),
}

pub fn execute(cfg: &RunConfig) -> Result<Outcome> {
    validate(cfg)?;
    std::fs::create_dir_all(cfg.out_dir())?;
    write_json(&cfg.echo_path(), cfg)?;
    match cfg {
        RunConfig::Generate(r) => generate(r),
        RunConfig::Simulate(r) => simulate_run(r),
        RunConfig::Infer(r) => infer(r),
        RunConfig::Benchmark(r) => benchmark(r),
    }
}

/// Parameter checks that do not need any input file.
fn validate(cfg: &RunConfig) -> Result<()> {
    match cfg {
        RunConfig::Generate(r) => match r.network {
            NetworkSpec::Random { nodes, observed, density } => {
                if !(density > 0.0 && density <= 1.0) {
                    return Err(NetinfError::InvalidParameter {
                        name: "density",
                        reason: format!("{density} is outside (0, 1]"),
                    });
                }
                if observed == 0 || observed > nodes {
                    return Err(NetinfError::InvalidParameter {
                        name: "observed",
                        reason: format!("need 1 <= observed <= nodes, got {observed} of {nodes}"),
                    });
                }
                Ok(())
            }
            NetworkSpec::Ring { .. } => Ok(()),
        },
        RunConfig::Simulate(r) if r.points == 0 => {
            Err(NetinfError::InvalidParameter { name: "points", reason: "must be at least 1".into() })
        }
        RunConfig::Simulate(_) => Ok(()),
        RunConfig::Infer(r) => {
            if r.data.is_empty() {
                return Err(NetinfError::Usage("at least one --data file is required".into()));
            }
            if r.trunc == 0 {
                return Err(NetinfError::InvalidParameter { name: "trunc", reason: "must be at least 1".into() });
            }
            r.vi.validate()?;
            r.keb.validate()
        }
        RunConfig::Benchmark(r) => r.grid.validate(),
    }
}

fn generate(r: &GenerateRun) -> Result<Outcome> {
    let model = r.network.generate(r.seed)?;
    let truth = derive_dsf_structure(&model);
    write_json(&r.out.join(MODEL_FILE), &model)?;
    write_json(&r.out.join(TRUTH_FILE), &truth)?;
    info!("{} network: {} states, {} observed, {} true links", r.network.name(), model.nodes, model.observed, truth.link_count());
    Ok(Outcome::Done)
}

fn simulate_run(r: &SimulateRun) -> Result<Outcome> {
    let model: StateSpaceModel = read_json(&r.model)?;
    model.validate()?;
    let exp = simulate(&model, r.points, r.noise, r.seed);
    write_experiment(&r.out.join(EXPERIMENT_FILE), &exp)?;
    Ok(Outcome::Done)
}

fn infer(r: &InferRun) -> Result<Outcome> {
    let experiments = r.data.iter().map(|p| read_experiment(p)).collect::<Result<Vec<_>>>()?;
    let scorer: Box<dyn StructureScorer> = match r.method {
        Method::Vi => Box::new(VariationalScorer { config: r.vi.clone() }),
        Method::KebTc => Box::new(KebScorer { config: r.keb.clone() }),
    };
    let net = infer_network(&experiments, scorer.as_ref(), &TopologyConfig { trunc: r.trunc, seed: r.seed })?;
    write_json(&r.out.join(NETWORK_FILE), &net)?;
    info!("{} links inferred", net.links.len());
    diagnostics(&net, &r.out)
}

#[derive(Serialize)]
struct NodeDiagnostic<'a> {
    target: usize,
    error: &'a str,
}

fn diagnostics(net: &InferredNetwork, out: &Path) -> Result<Outcome> {
    let failed: Vec<NodeDiagnostic> = net
        .nodes
        .iter()
        .filter(|n| n.trace.is_none())
        .map(|n| NodeDiagnostic { target: n.target, error: n.error.as_deref().unwrap_or("unknown") })
        .collect();
    if failed.is_empty() {
        return Ok(Outcome::Done);
    }
    let path = out.join(DIAGNOSTICS_FILE);
    write_json(&path, &failed)?;
    Ok(Outcome::Partial(format!("{} node(s) unresolved, see {}", failed.len(), path.display())))
}

fn benchmark(r: &BenchmarkRun) -> Result<Outcome> {
    let report = run_benchmark(&r.grid)?;
    write_trials_csv(&r.out.join(RESULTS_FILE), &report.trials)?;
    write_json(&r.out.join(SUMMARY_FILE), &report.summary)?;
    for c in &report.summary.cells {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
        info!(
            "{} N={} {}: PREC {} TPR {} ({} ok, {} failed)",
            c.noise,
            c.n_points,
            c.method,
            pct(c.mean_prec),
            pct(c.mean_tpr),
            c.trials_ok,
            c.trials_failed
        );
    }
    let empty: Vec<_> = report.summary.cells.iter().filter(|c| r.grid.trials > 0 && c.trials_ok == 0).collect();
    if empty.is_empty() {
        Ok(Outcome::Done)
    } else {
        Ok(Outcome::Partial(format!("{} cell(s) without a successful trial", empty.len())))
    }
}
