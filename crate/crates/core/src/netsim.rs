//! Random and ring network generation, ground-truth DSF structure, and
//! time-series simulation.
//!
//! States are ordered observed-first: the first `observed` states are the
//! measured nodes (`C = [I, 0]`) and the rest are hidden.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NetinfError, Result};

/// Regeneration cap for brute-force network sampling.
pub const MAX_GENERATION_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeneratorInfo {
    Random { seed: u64, density: f64, attempts: usize },
    Ring { seed: u64, hidden_per_edge: usize, hidden_edge_stride: usize, input_node: usize, attempts: usize },
    Manual,
}

/// Discrete-time linear system `x(t+1) = A x(t) + B_u u(t) + B_e e(t)`, `y = [I 0] x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpaceModel {
    pub nodes: usize,
    pub observed: usize,
    pub inputs: usize,
    pub noise_channels: usize,
    #[serde(with = "crate::dense")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::dense")]
    pub b_u: DMatrix<f64>,
    #[serde(with = "crate::dense")]
    pub b_e: DMatrix<f64>,
    pub generator: GeneratorInfo,
}

impl StateSpaceModel {
    pub fn new(a: DMatrix<f64>, b_u: DMatrix<f64>, b_e: DMatrix<f64>, observed: usize) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b_u.nrows() != n || b_e.nrows() != n {
            return Err(NetinfError::param("model", "A, B_u and B_e must have one row per state"));
        }
        if observed == 0 || observed > n {
            return Err(NetinfError::param("observed", format!("must be in 1..={n}")));
        }
        Ok(Self {
            nodes: n,
            observed,
            inputs: b_u.ncols(),
            noise_channels: b_e.ncols(),
            a,
            b_u,
            b_e,
            generator: GeneratorInfo::Manual,
        })
    }

    pub fn hidden(&self) -> usize {
        self.nodes - self.observed
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.a)
    }

    /// Checks dimensions and stability; used after deserialisation.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes;
        let dims_ok = self.a.shape() == (n, n)
            && self.b_u.shape() == (n, self.inputs)
            && self.b_e.shape() == (n, self.noise_channels)
            && self.observed >= 1
            && self.observed <= n;
        if !dims_ok {
            return Err(NetinfError::Format("model dimensions are inconsistent".into()));
        }
        if self.spectral_radius() >= 1.0 {
            return Err(NetinfError::param("a", "state matrix is not stable"));
        }
        Ok(())
    }
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Boolean zero structure of `Q` (observed x observed) and `P` (observed x inputs).
///
/// `q_adj[i][j]` is true when node `j` drives node `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DsfStructure {
    pub q_adj: Vec<Vec<bool>>,
    pub p_adj: Vec<Vec<bool>>,
}

impl DsfStructure {
    pub fn empty(p: usize, m: usize) -> Self {
        Self { q_adj: vec![vec![false; p]; p], p_adj: vec![vec![false; m]; p] }
    }

    /// Builds a structure, clearing the `Q` diagonal.
    pub fn new(mut q_adj: Vec<Vec<bool>>, p_adj: Vec<Vec<bool>>) -> Result<Self> {
        let p = q_adj.len();
        if q_adj.iter().any(|r| r.len() != p) || p_adj.len() != p {
            return Err(NetinfError::usage("Q must be p x p and P must have p rows"));
        }
        let m = p_adj.first().map_or(0, Vec::len);
        if p_adj.iter().any(|r| r.len() != m) {
            return Err(NetinfError::usage("P rows must all have the same length"));
        }
        for (i, row) in q_adj.iter_mut().enumerate() {
            row[i] = false;
        }
        Ok(Self { q_adj, p_adj })
    }

    pub fn observed(&self) -> usize {
        self.q_adj.len()
    }

    pub fn inputs(&self) -> usize {
        self.p_adj.first().map_or(0, Vec::len)
    }

    pub fn q_links(&self) -> usize {
        self.q_adj.iter().flatten().filter(|b| **b).count()
    }

    pub fn p_links(&self) -> usize {
        self.p_adj.iter().flatten().filter(|b| **b).count()
    }

    pub fn link_count(&self) -> usize {
        self.q_links() + self.p_links()
    }
}

/// Noise condition of a simulated experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSetting {
    /// Unit-variance inputs, noise variance `10^(-snr/10)`.
    SnrDb(f64),
    /// Inputs only.
    NoNoise,
    /// No inputs, unit-variance process noise.
    PureNoise,
}

impl NoiseSetting {
    pub fn input_variance(self) -> f64 {
        match self {
            NoiseSetting::PureNoise => 0.0,
            _ => 1.0,
        }
    }

    /// Process-noise variance for unit input variance.
    pub fn noise_variance(self) -> f64 {
        match self {
            NoiseSetting::SnrDb(db) => 10f64.powf(-db / 10.0),
            NoiseSetting::NoNoise => 0.0,
            NoiseSetting::PureNoise => 1.0,
        }
    }
}

impl fmt::Display for NoiseSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseSetting::SnrDb(db) => write!(f, "{db}"),
            NoiseSetting::NoNoise => f.write_str("none"),
            NoiseSetting::PureNoise => f.write_str("pure-noise"),
        }
    }
}

impl FromStr for NoiseSetting {
    type Err = NetinfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" | "no-noise" => Ok(NoiseSetting::NoNoise),
            "pure-noise" | "no-input" => Ok(NoiseSetting::PureNoise),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(NoiseSetting::SnrDb)
                .ok_or_else(|| NetinfError::param("snr", format!("`{other}` is not a number, `none` or `pure-noise`"))),
        }
    }
}

impl Serialize for NoiseSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NoiseSetting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One simulated time series: observed outputs and known inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    /// `p x N`
    pub y: DMatrix<f64>,
    /// `m x N`
    pub u: DMatrix<f64>,
    pub noise: NoiseSetting,
    pub seed: Option<u64>,
}

impl Experiment {
    pub fn new(y: DMatrix<f64>, u: DMatrix<f64>, noise: NoiseSetting) -> Result<Self> {
        if y.ncols() != u.ncols() {
            return Err(NetinfError::usage(format!(
                "outputs have {} samples but inputs have {}",
                y.ncols(),
                u.ncols()
            )));
        }
        Ok(Self { y, u, noise, seed: None })
    }

    pub fn n_points(&self) -> usize {
        self.y.ncols()
    }

    pub fn observed(&self) -> usize {
        self.y.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.u.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomNetworkConfig {
    pub nodes: usize,
    pub observed: usize,
    pub density: f64,
    pub max_attempts: usize,
}

impl Default for RandomNetworkConfig {
    fn default() -> Self {
        Self { nodes: 15, observed: 10, density: 0.15, max_attempts: MAX_GENERATION_ATTEMPTS }
    }
}

/// Sparse random stable network with each observed node driven by its own input.
///
/// Both `A` and its hidden-node sub-block are required to be stable.
pub fn generate_random_network(nodes: usize, observed: usize, density: f64, seed: u64) -> Result<StateSpaceModel> {
    generate_random_network_with(&RandomNetworkConfig { nodes, observed, density, ..Default::default() }, seed)
}

pub fn generate_random_network_with(cfg: &RandomNetworkConfig, seed: u64) -> Result<StateSpaceModel> {
    let RandomNetworkConfig { nodes: n, observed: p, density, max_attempts } = *cfg;
    if n == 0 || p == 0 || p > n {
        return Err(NetinfError::param("observed", format!("need 1 <= observed <= nodes, got {p} of {n}")));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(NetinfError::param("density", format!("{density} is outside (0, 1]")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_violation = String::new();
    for attempt in 1..=max_attempts {
        let a = DMatrix::from_fn(n, n, |_, _| {
            if rng.random::<f64>() < density {
                rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            }
        });
        if let Some(node) = first_isolated_node(&a) {
            last_violation = format!("node {node} is isolated");
            continue;
        }
        let rho = spectral_radius(&a);
        if rho >= 1.0 {
            last_violation = format!("spectral radius {rho:.3} >= 1");
            continue;
        }
        // poles of the hidden dynamics are the poles of the DSF transfer functions
        let hidden_rho = if n > p { spectral_radius(&a.view((p, p), (n - p, n - p)).into_owned()) } else { 0.0 };
        if hidden_rho >= 1.0 {
            last_violation = format!("hidden sub-block spectral radius {hidden_rho:.3} >= 1");
            continue;
        }
        let b_u = DMatrix::from_fn(n, p, |i, j| if i == j { 1.0 } else { 0.0 });
        let b_e = DMatrix::identity(n, n);
        let mut model = StateSpaceModel::new(a, b_u, b_e, p)?;
        model.generator = GeneratorInfo::Random { seed, density, attempts: attempt };
        return Ok(model);
    }
    Err(NetinfError::Generation { attempts: max_attempts, constraint: last_violation })
}

fn first_isolated_node(a: &DMatrix<f64>) -> Option<usize> {
    let n = a.nrows();
    (0..n).find(|&k| !(0..n).any(|j| j != k && (a[(k, j)] != 0.0 || a[(j, k)] != 0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingNetworkConfig {
    pub observed: usize,
    /// Hidden states inserted in series on each selected ring edge.
    pub hidden_per_edge: usize,
    /// Hidden chains go on edges `0, stride, 2*stride, ...`.
    pub hidden_edge_stride: usize,
    /// Observed node receiving the single input.
    pub input_node: usize,
    pub max_attempts: usize,
}

impl Default for RingNetworkConfig {
    fn default() -> Self {
        Self { observed: 10, hidden_per_edge: 1, hidden_edge_stride: 2, input_node: 0, max_attempts: MAX_GENERATION_ATTEMPTS }
    }
}

/// Directed ring over the observed nodes with one input and per-node noise.
///
/// Self-decays are `U(0.1, 0.4)` and link weights `+-U(0.5, 0.9)`; draws are
/// repeated until the state matrix is stable.
pub fn generate_ring_network(observed: usize, hidden_per_edge: usize, seed: u64) -> Result<StateSpaceModel> {
    generate_ring_network_with(&RingNetworkConfig { observed, hidden_per_edge, ..Default::default() }, seed)
}

pub fn generate_ring_network_with(cfg: &RingNetworkConfig, seed: u64) -> Result<StateSpaceModel> {
    let p = cfg.observed;
    if p < 3 {
        return Err(NetinfError::param("observed", "a ring needs at least 3 nodes"));
    }
    if cfg.input_node >= p {
        return Err(NetinfError::param("input_node", "must be an observed node"));
    }
    let stride = cfg.hidden_edge_stride.max(1);
    let chained_edges = (0..p).filter(|e| e % stride == 0).count();
    let n = p + chained_edges * cfg.hidden_per_edge;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_violation = String::new();
    for attempt in 1..=cfg.max_attempts {
        let mut a = DMatrix::zeros(n, n);
        for k in 0..n {
            a[(k, k)] = rng.random_range(0.1..0.4);
        }
        let mut next_hidden = p;
        for edge in 0..p {
            let to = (edge + 1) % p;
            let mut from = edge;
            if edge % stride == 0 {
                for _ in 0..cfg.hidden_per_edge {
                    a[(next_hidden, from)] = random_weight(&mut rng);
                    from = next_hidden;
                    next_hidden += 1;
                }
            }
            a[(to, from)] = random_weight(&mut rng);
        }
        let rho = spectral_radius(&a);
        if rho >= 1.0 {
            last_violation = format!("spectral radius {rho:.3} >= 1");
            continue;
        }
        let mut b_u = DMatrix::zeros(n, 1);
        b_u[(cfg.input_node, 0)] = 1.0;
        let mut model = StateSpaceModel::new(a, b_u, DMatrix::identity(n, n), p)?;
        model.generator = GeneratorInfo::Ring {
            seed,
            hidden_per_edge: cfg.hidden_per_edge,
            hidden_edge_stride: stride,
            input_node: cfg.input_node,
            attempts: attempt,
        };
        return Ok(model);
    }
    Err(NetinfError::Generation { attempts: cfg.max_attempts, constraint: last_violation })
}

fn random_weight(rng: &mut ChaCha8Rng) -> f64 {
    let mag = rng.random_range(0.5..0.9);
    if rng.random::<bool>() {
        mag
    } else {
        -mag
    }
}

/// Ground-truth DSF zero structure by boolean reachability through hidden states.
///
/// `W = A11 + A12 (qI - A22)^-1 A21` has a structural nonzero at `(i, j)` when
/// `A11[i, j] != 0` or some path `j -> h_1 -> ... -> h_k -> i` runs through
/// hidden states only. `V_u = B_u1 + A12 (qI - A22)^-1 B_u2` likewise.
pub fn derive_dsf_structure(model: &StateSpaceModel) -> DsfStructure {
    let n = model.nodes;
    let p = model.observed;
    let m = model.inputs;
    let a = &model.a;

    // hidden states reachable from a set of seed hidden states
    let closure = |seeds: Vec<usize>| -> Vec<bool> {
        let mut seen = vec![false; n];
        let mut stack = seeds;
        while let Some(h) = stack.pop() {
            if seen[h] {
                continue;
            }
            seen[h] = true;
            for next in p..n {
                if !seen[next] && a[(next, h)] != 0.0 {
                    stack.push(next);
                }
            }
        }
        seen
    };
    let reached_targets = |reached: &[bool], i: usize| (p..n).any(|h| reached[h] && a[(i, h)] != 0.0);

    let mut q_adj = vec![vec![false; p]; p];
    for j in 0..p {
        let reached = closure((p..n).filter(|&h| a[(h, j)] != 0.0).collect());
        for i in 0..p {
            if i != j {
                q_adj[i][j] = a[(i, j)] != 0.0 || reached_targets(&reached, i);
            }
        }
    }
    let mut p_adj = vec![vec![false; m]; p];
    for k in 0..m {
        let reached = closure((p..n).filter(|&h| model.b_u[(h, k)] != 0.0).collect());
        for i in 0..p {
            p_adj[i][k] = model.b_u[(i, k)] != 0.0 || reached_targets(&reached, i);
        }
    }
    DsfStructure { q_adj, p_adj }
}

/// Simulates `n_points` samples from `x(0) = 0`.
///
/// Column `t` of the result holds `y(t)` and `u(t)`, where `u(t)` drives `x(t+1)`.
pub fn simulate(model: &StateSpaceModel, n_points: usize, noise: NoiseSetting, seed: u64) -> Experiment {
    let n = model.nodes;
    let p = model.observed;
    let m = model.inputs;
    let q = model.noise_channels;
    let u_std = noise.input_variance().sqrt();
    let e_std = noise.noise_variance().sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = DMatrix::zeros(p, n_points);
    let mut u = DMatrix::zeros(m, n_points);
    let mut x = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut e = vec![0.0; q];
    for t in 0..n_points {
        for i in 0..p {
            y[(i, t)] = x[i];
        }
        for k in 0..m {
            let z: f64 = rng.sample(StandardNormal);
            u[(k, t)] = u_std * z;
        }
        for ek in e.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *ek = e_std * z;
        }
        for (i, nx) in next.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..n {
                acc += model.a[(i, j)] * x[j];
            }
            for k in 0..m {
                acc += model.b_u[(i, k)] * u[(k, t)];
            }
            for (k, ek) in e.iter().enumerate() {
                acc += model.b_e[(i, k)] * ek;
            }
            *nx = acc;
        }
        std::mem::swap(&mut x, &mut next);
    }
    Experiment { y, u, noise, seed: Some(seed) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manual(a: &[f64], n: usize, p: usize, m: usize) -> StateSpaceModel {
        let a = DMatrix::from_row_slice(n, n, a);
        let b_u = DMatrix::from_fn(n, m, |i, j| if i == j { 1.0 } else { 0.0 });
        StateSpaceModel::new(a, b_u, DMatrix::identity(n, n), p).unwrap()
    }

    #[test]
    fn random_network_constraints() {
        for seed in 0..30 {
            let m = generate_random_network(15, 10, 0.15, seed).unwrap();
            assert!(m.spectral_radius() < 1.0);
            assert!(spectral_radius(&m.a.view((10, 10), (5, 5)).into_owned()) < 1.0);
            assert_eq!(first_isolated_node(&m.a), None);
        }
        let m = generate_random_network(15, 10, 0.15, 7).unwrap();
        assert_eq!((m.nodes, m.observed, m.inputs, m.noise_channels), (15, 10, 10, 15));
        assert_eq!(m.hidden(), 5);
    }

    #[test]
    fn random_network_is_deterministic() {
        assert_eq!(generate_random_network(15, 10, 0.15, 7).unwrap(), generate_random_network(15, 10, 0.15, 7).unwrap());
        assert_ne!(generate_random_network(15, 10, 0.15, 7).unwrap(), generate_random_network(15, 10, 0.15, 8).unwrap());
    }

    #[test]
    fn small_dense_network() {
        let m = generate_random_network(2, 2, 0.99, 3).unwrap();
        assert!(m.spectral_radius() < 1.0);
        assert!(m.a[(0, 1)] != 0.0 || m.a[(1, 0)] != 0.0);
    }

    #[test]
    fn generation_failure_names_constraint() {
        let cfg = RandomNetworkConfig { nodes: 6, observed: 3, density: 0.01, max_attempts: 5 };
        match generate_random_network_with(&cfg, 1) {
            Err(NetinfError::Generation { attempts: 5, constraint }) => assert!(constraint.contains("isolated")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(generate_random_network(5, 6, 0.2, 1).is_err());
        assert!(generate_random_network(5, 3, 1.5, 1).is_err());
    }

    #[test]
    fn ring_network_structure() {
        for seed in 0..20 {
            let m = generate_ring_network(10, 1, seed).unwrap();
            assert!(m.spectral_radius() < 1.0);
            assert_eq!(m.nodes, 15);
            let s = derive_dsf_structure(&m);
            assert_eq!(s.q_links(), 10);
            assert_eq!(s.p_links(), 1);
            for i in 0..10 {
                assert!(s.q_adj[(i + 1) % 10][i], "missing ring edge {i}");
            }
        }
        let s = derive_dsf_structure(&generate_ring_network(3, 0, 5).unwrap());
        let expected = vec![vec![false, false, true], vec![true, false, false], vec![false, true, false]];
        assert_eq!(s.q_adj, expected);
        assert!(generate_ring_network(2, 0, 0).is_err());
    }

    #[test]
    fn structure_without_hidden_influence() {
        let model = manual(&[0.5, 0.2, 0.0, 0.3], 2, 2, 2);
        let s = derive_dsf_structure(&model);
        assert_eq!(s.q_adj, vec![vec![false, true], vec![false, false]]);
    }

    #[test]
    fn structure_through_hidden_chain() {
        // observed 0 -> hidden 2 -> observed 1
        let model = manual(&[0.5, 0.0, 0.0, 0.0, 0.5, 0.7, 0.8, 0.0, 0.3], 3, 2, 2);
        let s = derive_dsf_structure(&model);
        assert!(s.q_adj[1][0]);
        assert!(!s.q_adj[0][1]);
    }

    #[test]
    fn empty_structure() {
        let model = manual(&[0.0; 9], 3, 3, 0);
        let s = derive_dsf_structure(&model);
        assert_eq!(s, DsfStructure::empty(3, 0));
    }

    #[test]
    fn noise_settings() {
        assert!((NoiseSetting::SnrDb(10.0).noise_variance() - 0.1).abs() < 1e-15);
        assert_eq!("none".parse::<NoiseSetting>().unwrap(), NoiseSetting::NoNoise);
        assert_eq!("pure-noise".parse::<NoiseSetting>().unwrap(), NoiseSetting::PureNoise);
        assert_eq!("10".parse::<NoiseSetting>().unwrap(), NoiseSetting::SnrDb(10.0));
        assert!("loud".parse::<NoiseSetting>().is_err());
        assert_eq!(NoiseSetting::SnrDb(10.0).to_string(), "10");
    }

    #[test]
    fn zero_excitation_gives_zero_output() {
        let model = generate_random_network(6, 4, 0.3, 2).unwrap();
        let mut silent = model.clone();
        silent.b_u.fill(0.0);
        let exp = simulate(&silent, 50, NoiseSetting::NoNoise, 1);
        assert!(exp.y.iter().all(|v| *v == 0.0));
        let exp = simulate(&model, 50, NoiseSetting::PureNoise, 1);
        assert!(exp.u.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn simulation_is_deterministic_and_bounded() {
        let model = generate_random_network(15, 10, 0.15, 11).unwrap();
        let a = simulate(&model, 10_000, NoiseSetting::SnrDb(10.0), 4);
        let b = simulate(&model, 10_000, NoiseSetting::SnrDb(10.0), 4);
        assert_eq!(a, b);
        assert_eq!(a.y.shape(), (10, 10_000));
        let var = a.y.iter().map(|v| v * v).sum::<f64>() / a.y.len() as f64;
        assert!(var.is_finite() && var < 1e4);
    }

    #[test]
    fn simulated_noise_variance_follows_snr() {
        // single state without dynamics: y(t+1) = e(t)
        let model = StateSpaceModel::new(
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            1,
        )
        .unwrap();
        let exp = simulate(&model, 200_000, NoiseSetting::SnrDb(10.0), 9);
        let var = exp.y.iter().map(|v| v * v).sum::<f64>() / exp.y.len() as f64;
        assert!((var - 0.1).abs() < 0.002, "{var}");
    }

    /// Exact integer Markov-parameter oracle: `W(z) = A11 + sum_k A12 A22^k A21 z^-(k+1)`
    /// is the zero function at `(i, j)` iff `A11[i, j]` and every Markov
    /// parameter vanish (Cayley–Hamilton bounds `k < n - p`).
    fn markov_oracle(a: &[Vec<i128>], p: usize) -> Vec<Vec<bool>> {
        let n = a.len();
        let h = n - p;
        let mut out = vec![vec![false; p]; p];
        // power = A22^k, starting at identity
        let mut power: Vec<Vec<i128>> = (0..h).map(|r| (0..h).map(|c| i128::from(r == c)).collect()).collect();
        for i in 0..p {
            for j in 0..p {
                out[i][j] = i != j && a[i][j] != 0;
            }
        }
        for _ in 0..h.max(1) {
            for i in 0..p {
                for j in 0..p {
                    let mut acc = 0i128;
                    for r in 0..h {
                        for c in 0..h {
                            acc += a[i][p + r] * power[r][c] * a[p + c][j];
                        }
                    }
                    if i != j && acc != 0 {
                        out[i][j] = true;
                    }
                }
            }
            power = (0..h)
                .map(|r| (0..h).map(|c| (0..h).map(|k| power[r][k] * a[p + k][p + c]).sum()).collect())
                .collect();
        }
        out
    }

    #[test]
    fn structure_matches_exact_markov_oracle() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..=5usize);
            let p = rng.random_range(1..=n);
            // positive integer weights rule out accidental cancellation
            let ints: Vec<Vec<i128>> = (0..n)
                .map(|_| (0..n).map(|_| if rng.random::<f64>() < 0.4 { rng.random_range(1..=9) } else { 0 }).collect())
                .collect();
            let a = DMatrix::from_fn(n, n, |i, j| ints[i][j] as f64);
            let model = StateSpaceModel::new(a, DMatrix::zeros(n, 0), DMatrix::identity(n, n), p).unwrap();
            let s = derive_dsf_structure(&model);
            assert_eq!(s.q_adj, markov_oracle(&ints, p), "seed {seed}");
            assert!((0..p).all(|i| !s.q_adj[i][i]));
        }
    }
}
