//! Topology scores, prediction fitness, and the Monte Carlo benchmark harness.

use std::str::FromStr;
use std::time::Instant;

use log::warn;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NetinfError, Result};
use crate::keb::{KebConfig, KebScorer};
use crate::netsim::{
    derive_dsf_structure, generate_random_network, generate_ring_network, simulate, DsfStructure, Experiment,
    NoiseSetting, StateSpaceModel,
};
use crate::problem::{assemble, predict_one_step, DEFAULT_TRUNCATION};
use crate::seed::derive_seed;
use crate::topology::{infer_network, InferredNetwork, Method, StructureScorer, TopologyConfig, VariationalScorer};
use crate::vi::ViConfig;

pub const PREC_CONVENTION: &str = "prec = 1 when no links are inferred; tpr = 1 when the truth has no links";
pub const FITNESS_MODE: &str = "one-step-ahead prediction on a fresh validation series";
pub const SEED_DERIVATION: &str =
    "trial seed = derive_seed(master, trial); network = derive_seed(trial, 0); training data = derive_seed(trial, 1); \
     validation data = derive_seed(trial, 2); inference = derive_seed(trial, 3)";
pub const DEFAULT_VALIDATION_POINTS: usize = 200;
pub const DEFAULT_TRIALS: usize = 20;

/// Link counts over `Q` (off-diagonal) and `P` jointly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopologyScore {
    pub tpr: f64,
    pub prec: f64,
    pub true_links: usize,
    pub inferred_links: usize,
    pub true_positives: usize,
}

pub fn score_topology(truth: &DsfStructure, inferred: &DsfStructure) -> Result<TopologyScore> {
    if truth.observed() != inferred.observed() || truth.inputs() != inferred.inputs() {
        return Err(NetinfError::usage(format!(
            "truth is {}x{} but the inferred structure is {}x{}",
            truth.observed(),
            truth.inputs(),
            inferred.observed(),
            inferred.inputs()
        )));
    }
    let pairs = truth
        .q_adj
        .iter()
        .zip(&inferred.q_adj)
        .enumerate()
        .flat_map(|(i, (t, e))| t.iter().zip(e).enumerate().filter(move |(j, _)| *j != i).map(|(_, p)| p))
        .chain(truth.p_adj.iter().zip(&inferred.p_adj).flat_map(|(t, e)| t.iter().zip(e)));
    let (mut tp, mut true_links, mut inferred_links) = (0, 0, 0);
    for (t, e) in pairs {
        true_links += usize::from(*t);
        inferred_links += usize::from(*e);
        tp += usize::from(*t && *e);
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(TopologyScore {
        tpr: ratio(tp, true_links),
        prec: ratio(tp, inferred_links),
        true_links,
        inferred_links,
        true_positives: tp,
    })
}

/// `100 (1 - ||y - y_hat|| / ||y - mean(y)||)`; `None` for a constant series.
pub fn fitness(actual: &[f64], predicted: &[f64]) -> Result<Option<f64>> {
    if actual.len() != predicted.len() {
        return Err(NetinfError::usage(format!(
            "series lengths differ: {} observed vs {} predicted",
            actual.len(),
            predicted.len()
        )));
    }
    if actual.is_empty() {
        return Ok(None);
    }
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let spread = actual.iter().map(|y| (y - mean).powi(2)).sum::<f64>().sqrt();
    if spread == 0.0 {
        return Ok(None);
    }
    let err = actual.iter().zip(predicted).map(|(y, p)| (y - p).powi(2)).sum::<f64>().sqrt();
    Ok(Some(100.0 * (1.0 - err / spread)))
}

/// Per-node fitness of one-step-ahead predictions from each node's chosen model.
pub fn fitness_per_node(validation: &Experiment, network: &InferredNetwork) -> Result<Vec<Option<f64>>> {
    network
        .nodes
        .iter()
        .map(|node| {
            let Some(trace) = &node.trace else { return Ok(None) };
            let problem = assemble(std::slice::from_ref(validation), trace.chosen_structure(), network.trunc)?;
            let w = DVector::from_column_slice(&trace.w_mean);
            let pred = predict_one_step(&problem, &w)?;
            let f = fitness(problem.experiments[0].y.as_slice(), pred[0].as_slice())?;
            if f.is_none() {
                warn!("y{}: constant validation series, fitness undefined", node.target + 1);
            }
            Ok(f)
        })
        .collect()
}

/// Mean over nodes with a defined fitness.
pub fn mean_fitness(per_node: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = per_node.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NetworkSpec {
    Random { nodes: usize, observed: usize, density: f64 },
    Ring { observed: usize, hidden_per_edge: usize },
}

impl NetworkSpec {
    pub fn name(&self) -> &'static str {
        match self {
            NetworkSpec::Random { .. } => "random",
            NetworkSpec::Ring { .. } => "ring",
        }
    }

    pub fn generate(&self, seed: u64) -> Result<StateSpaceModel> {
        match *self {
            NetworkSpec::Random { nodes, observed, density } => generate_random_network(nodes, observed, density, seed),
            NetworkSpec::Ring { observed, hidden_per_edge } => generate_ring_network(observed, hidden_per_edge, seed),
        }
    }
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec::Random { nodes: 15, observed: 10, density: 0.15 }
    }
}

/// Named condition grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// Random networks, no noise.
    Table1,
    /// Random networks, 10 dB.
    Table2,
    /// Random networks, pure noise.
    Table3,
    /// Ring networks, 10 dB.
    Table4,
}

impl FromStr for Suite {
    type Err = NetinfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(Suite::Table1),
            "table2" => Ok(Suite::Table2),
            "table3" => Ok(Suite::Table3),
            "table4" => Ok(Suite::Table4),
            other => Err(NetinfError::param("suite", format!("unknown suite `{other}` (expected table1..table4 or custom)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub name: String,
    pub network: NetworkSpec,
    pub trials: usize,
    pub noise: Vec<NoiseSetting>,
    pub lengths: Vec<usize>,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub trunc: usize,
    pub validation_points: usize,
    pub vi: ViConfig,
    pub keb: KebConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self::preset(Suite::Table1)
    }
}

impl BenchmarkConfig {
    pub fn preset(suite: Suite) -> Self {
        let (name, network, noise, lengths) = match suite {
            Suite::Table1 => ("table1", NetworkSpec::default(), NoiseSetting::NoNoise, vec![45, 65, 85]),
            Suite::Table2 => ("table2", NetworkSpec::default(), NoiseSetting::SnrDb(10.0), vec![100, 200, 300]),
            Suite::Table3 => ("table3", NetworkSpec::default(), NoiseSetting::PureNoise, vec![300, 500, 1000]),
            Suite::Table4 => (
                "table4",
                NetworkSpec::Ring { observed: 10, hidden_per_edge: 1 },
                NoiseSetting::SnrDb(10.0),
                vec![100, 200, 300, 400],
            ),
        };
        Self {
            name: name.into(),
            network,
            trials: DEFAULT_TRIALS,
            noise: vec![noise],
            lengths,
            methods: vec![Method::Vi, Method::KebTc],
            seed: 0,
            trunc: DEFAULT_TRUNCATION,
            validation_points: DEFAULT_VALIDATION_POINTS,
            vi: ViConfig::default(),
            keb: KebConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunc == 0 {
            return Err(NetinfError::param("trunc", "must be at least 1"));
        }
        if let Some(n) = self.lengths.iter().find(|n| **n <= self.trunc) {
            return Err(NetinfError::param("lengths", format!("{n} points do not exceed the truncation length {}", self.trunc)));
        }
        if self.validation_points <= self.trunc {
            return Err(NetinfError::param("validation_points", format!("must exceed the truncation length {}", self.trunc)));
        }
        if self.noise.is_empty() || self.lengths.is_empty() || self.methods.is_empty() {
            return Err(NetinfError::usage("the grid needs at least one noise setting, length and method"));
        }
        self.vi.validate()?;
        self.keb.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub topology: String,
    pub noise: NoiseSetting,
    pub n_points: usize,
    pub method: Method,
    pub score: Option<TopologyScore>,
    pub fitness_per_node: Vec<Option<f64>>,
    pub mean_fitness: Option<f64>,
    pub unresolved_nodes: Vec<usize>,
    pub runtime_secs: f64,
    pub error: Option<String>,
}

impl TrialResult {
    pub fn tpr(&self) -> Option<f64> {
        self.score.map(|s| s.tpr)
    }

    pub fn prec(&self) -> Option<f64> {
        self.score.map(|s| s.prec)
    }

    fn same_cell(&self, other: &CellSummary) -> bool {
        self.noise == other.noise && self.n_points == other.n_points && self.method == other.method
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub noise: NoiseSetting,
    pub n_points: usize,
    pub method: Method,
    pub trials_ok: usize,
    pub trials_failed: usize,
    pub mean_tpr: Option<f64>,
    pub se_tpr: Option<f64>,
    pub mean_prec: Option<f64>,
    pub se_prec: Option<f64>,
    pub mean_fitness: Option<f64>,
    pub median_fitness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryMetadata {
    pub prec_convention: String,
    pub fitness_mode: String,
    pub seed_derivation: String,
    pub keb_prune_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub metadata: SummaryMetadata,
    pub config: BenchmarkConfig,
    pub cells: Vec<CellSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub trials: Vec<TrialResult>,
    pub summary: BenchmarkSummary,
}

/// Mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len().is_multiple_of(2) { 0.5 * (v[mid - 1] + v[mid]) } else { v[mid] })
}

/// Per-cell aggregates in grid order (noise, length, method).
pub fn aggregate(cfg: &BenchmarkConfig, trials: &[TrialResult]) -> Vec<CellSummary> {
    let mut cells = Vec::new();
    for &noise in &cfg.noise {
        for &n_points in &cfg.lengths {
            for &method in &cfg.methods {
                let mut cell = CellSummary {
                    noise,
                    n_points,
                    method,
                    trials_ok: 0,
                    trials_failed: 0,
                    mean_tpr: None,
                    se_tpr: None,
                    mean_prec: None,
                    se_prec: None,
                    mean_fitness: None,
                    median_fitness: None,
                };
                let members: Vec<&TrialResult> = trials.iter().filter(|t| t.same_cell(&cell)).collect();
                let ok: Vec<&TrialResult> = members.iter().copied().filter(|t| t.score.is_some()).collect();
                cell.trials_ok = ok.len();
                cell.trials_failed = members.len() - ok.len();
                let tpr: Vec<f64> = ok.iter().filter_map(|t| t.tpr()).collect();
                let prec: Vec<f64> = ok.iter().filter_map(|t| t.prec()).collect();
                let fit: Vec<f64> = ok.iter().filter_map(|t| t.mean_fitness).collect();
                (cell.mean_tpr, cell.se_tpr) = mean_and_se(&tpr);
                (cell.mean_prec, cell.se_prec) = mean_and_se(&prec);
                cell.mean_fitness = mean_and_se(&fit).0;
                cell.median_fitness = median(&fit);
                cells.push(cell);
            }
        }
    }
    cells
}

fn scorer_for(cfg: &BenchmarkConfig, method: Method) -> Box<dyn StructureScorer> {
    match method {
        Method::Vi => Box::new(VariationalScorer { config: cfg.vi.clone() }),
        Method::KebTc => Box::new(KebScorer { config: cfg.keb.clone() }),
    }
}

fn run_trial(cfg: &BenchmarkConfig, trial: usize) -> Vec<TrialResult> {
    let seed = derive_seed(cfg.seed, trial as u64);
    let model = cfg.network.generate(derive_seed(seed, 0));
    let mut out = Vec::new();
    for &noise in &cfg.noise {
        for &n_points in &cfg.lengths {
            for &method in &cfg.methods {
                let start = Instant::now();
                let mut result = TrialResult {
                    trial,
                    seed,
                    topology: cfg.network.name().into(),
                    noise,
                    n_points,
                    method,
                    score: None,
                    fitness_per_node: Vec::new(),
                    mean_fitness: None,
                    unresolved_nodes: Vec::new(),
                    runtime_secs: 0.0,
                    error: None,
                };
                let outcome = model.as_ref().map_err(|e| e.to_string()).and_then(|m| {
                    evaluate(cfg, m, seed, noise, n_points, method).map_err(|e| e.to_string())
                });
                match outcome {
                    Ok((score, fit, unresolved)) => {
                        result.mean_fitness = mean_fitness(&fit);
                        result.score = Some(score);
                        result.fitness_per_node = fit;
                        result.unresolved_nodes = unresolved;
                    }
                    Err(e) => {
                        warn!("trial {trial} ({noise}, N={n_points}, {method}) failed: {e}");
                        result.error = Some(e);
                    }
                }
                result.runtime_secs = start.elapsed().as_secs_f64();
                out.push(result);
            }
        }
    }
    out
}

fn evaluate(
    cfg: &BenchmarkConfig,
    model: &StateSpaceModel,
    seed: u64,
    noise: NoiseSetting,
    n_points: usize,
    method: Method,
) -> Result<(TopologyScore, Vec<Option<f64>>, Vec<usize>)> {
    let truth = derive_dsf_structure(model);
    let train = simulate(model, n_points, noise, derive_seed(seed, 1));
    let validation = simulate(model, cfg.validation_points, noise, derive_seed(seed, 2));
    let scorer = scorer_for(cfg, method);
    let topo = TopologyConfig { trunc: cfg.trunc, seed: derive_seed(seed, 3) };
    let net = infer_network(std::slice::from_ref(&train), scorer.as_ref(), &topo)?;
    let score = score_topology(&truth, &net.structure)?;
    let fit = fitness_per_node(&validation, &net)?;
    Ok((score, fit, net.unresolved()))
}

/// Runs every trial of the grid (trials in parallel) and aggregates per cell.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let trials: Vec<TrialResult> = (0..cfg.trials).into_par_iter().flat_map_iter(|k| run_trial(cfg, k)).collect();
    let summary = BenchmarkSummary {
        metadata: SummaryMetadata {
            prec_convention: PREC_CONVENTION.into(),
            fitness_mode: FITNESS_MODE.into(),
            seed_derivation: SEED_DERIVATION.into(),
            keb_prune_threshold: cfg.keb.prune_threshold,
        },
        cells: aggregate(cfg, &trials),
        config: cfg.clone(),
    };
    Ok(BenchmarkReport { trials, summary })
}
