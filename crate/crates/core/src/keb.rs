//! Empirical-Bayes baseline with a TC kernel.
//!
//! Each column block `i` has prior `w_i ~ N(0, gamma_i K(beta_i))` and the
//! noise variance is `sigma`. Hyperparameters minimise
//! `sum_q Y_q' S_q^-1 Y_q + log |S_q|` with `S_q = sigma I + Phi_q Gamma K Phi_q'`,
//! fitted by EM with `w` as the latent variable.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{NetinfError, Result};
use crate::kernel::{bidiag_quadratic_diag, clamp_beta, tc_inverse_decomposition, tc_log_det_raw, tc_weights_into};
use crate::kernel::{TcDecomposition, TcKernelParam, BETA_MAX, BETA_MIN};
use crate::problem::{Block, ExperimentData, GroupId, ModelStructure, RegressionProblem};
use crate::topology::{Method, ScoredFit, StructureScorer};
use crate::vi::{build_cache, posterior, ExperimentCache};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Groups whose `gamma` falls below this fraction of the largest one are
/// dropped from the EM loop; they no longer affect the objective in double
/// precision.
const DEAD_GROUP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KebConfig {
    pub max_iter: usize,
    /// Relative objective decrease below which EM stops.
    pub tol: f64,
    /// Groups with `gamma < prune_threshold * max(gamma)` are reported as absent.
    pub prune_threshold: f64,
    /// Grid size for the `beta` search before golden-section refinement.
    pub beta_grid: usize,
    pub init_gamma: f64,
    pub init_beta: f64,
}

impl Default for KebConfig {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-5, prune_threshold: 1e-6, beta_grid: 32, init_gamma: 1.0, init_beta: 0.5 }
    }
}

impl KebConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(NetinfError::param("max_iter", "must be at least 1"));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(NetinfError::param("tol", format!("{} is not a positive tolerance", self.tol)));
        }
        if !(self.prune_threshold >= 0.0 && self.prune_threshold < 1.0) {
            return Err(NetinfError::param("prune_threshold", format!("{} is outside [0, 1)", self.prune_threshold)));
        }
        if self.beta_grid < 3 {
            return Err(NetinfError::param("beta_grid", "need at least 3 grid points"));
        }
        if !(self.init_gamma > 0.0 && self.init_gamma.is_finite()) {
            return Err(NetinfError::param("init_gamma", format!("{} is not positive", self.init_gamma)));
        }
        TcKernelParam::new(self.init_beta).map(|_| ())
    }
}

/// Hyperparameters of one EM run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KebState {
    pub blocks: Vec<Block>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma: f64,
    /// Objective at the start of every iteration, plus the final value.
    pub objective_trace: Vec<f64>,
}

impl KebState {
    pub fn new(blocks: Vec<Block>, gamma: Vec<f64>, beta: Vec<f64>, sigma: f64) -> Result<Self> {
        if gamma.len() != blocks.len() || beta.len() != blocks.len() {
            return Err(NetinfError::usage(format!(
                "{} blocks but {} gamma and {} beta values",
                blocks.len(),
                gamma.len(),
                beta.len()
            )));
        }
        if let Some(g) = gamma.iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
            return Err(NetinfError::param("gamma", format!("{g} is not a finite non-negative scale")));
        }
        if !blocks.is_empty() && gamma.iter().all(|g| *g == 0.0) {
            return Err(NetinfError::param("gamma", "all scales are zero"));
        }
        for b in &beta {
            TcKernelParam::new(*b)?;
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(NetinfError::param("sigma", format!("{sigma} is not a positive variance")));
        }
        Ok(Self { blocks, gamma, beta, sigma, objective_trace: Vec::new() })
    }

    fn initial(problem: &RegressionProblem, cfg: &KebConfig) -> Result<Self> {
        let rows = problem.total_rows().max(1) as f64;
        let power = problem.experiments.iter().map(|e| e.y.norm_squared()).sum::<f64>() / rows;
        let n = problem.block_count();
        Self::new(problem.blocks.clone(), vec![cfg.init_gamma; n], vec![cfg.init_beta; n], power.max(f64::MIN_POSITIVE.sqrt()))
    }
}

/// Posterior of `w` and the objective at fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct KebPosterior {
    /// Posterior means (length `T * blocks`, zero on inactive blocks).
    pub mean: Vec<DVector<f64>>,
    /// Posterior covariance diagonal blocks (zero on inactive blocks).
    pub cov_blocks: Vec<Vec<DMatrix<f64>>>,
    /// `sum_q Y' S^-1 Y + log |S|`.
    pub objective: f64,
    /// `sum_q ||Y - Phi m||^2 + trace(Phi C Phi')`.
    pub expected_residual: f64,
}

/// Column subset of the problem restricted to blocks with `gamma > 0`.
struct ActiveSet {
    blocks: Vec<usize>,
    data: Vec<ExperimentData>,
    cache: Vec<ExperimentCache>,
}

impl ActiveSet {
    fn new(problem: &RegressionProblem, gamma: &[f64]) -> Self {
        let t = problem.trunc;
        let blocks: Vec<usize> = (0..gamma.len()).filter(|&i| gamma[i] > 0.0).collect();
        let data: Vec<ExperimentData> = problem
            .experiments
            .iter()
            .map(|e| {
                let mut phi = DMatrix::zeros(e.rows(), blocks.len() * t);
                for (k, &i) in blocks.iter().enumerate() {
                    phi.columns_mut(k * t, t).copy_from(&e.phi.columns(i * t, t));
                }
                ExperimentData { y: e.y.clone(), phi }
            })
            .collect();
        let sub = RegressionProblem {
            structure: problem.structure.clone(),
            blocks: blocks.iter().map(|&i| problem.blocks[i]).collect(),
            trunc: t,
            experiments: data,
        };
        let cache = build_cache(&sub);
        Self { blocks, data: sub.experiments, cache }
    }
}

fn posterior_on(
    active: &ActiveSet,
    total_blocks: usize,
    t: usize,
    gamma: &[f64],
    kinv: &[TcDecomposition],
    sigma: f64,
) -> Result<KebPosterior> {
    // sigma * (Phi'Phi / sigma + (Gamma K)^-1)^-1 is the information-form
    // posterior with prior precision (sigma / gamma_i) K_i^-1
    let prior: Vec<(f64, &TcDecomposition)> = active.blocks.iter().map(|&i| (sigma / gamma[i], &kinv[i])).collect();
    let d_active = (active.blocks.len() * t) as f64;
    let log_prior_det: f64 = active.blocks.iter().map(|&i| t as f64 * gamma[i].ln() - kinv[i].log_det()).sum();
    let mut out = KebPosterior { mean: Vec::new(), cov_blocks: Vec::new(), objective: 0.0, expected_residual: 0.0 };
    for (data, cache) in active.data.iter().zip(&active.cache) {
        let post = posterior(data, cache, &prior, t)?;
        let n = data.rows() as f64;
        let y_t_y = data.y.norm_squared();
        let log_det_a = -post.fit.log_det_sigma - d_active * sigma.ln();
        out.objective += (y_t_y - post.quad_y).max(0.0) / sigma + n * sigma.ln() + log_prior_det + log_det_a;
        out.expected_residual += post.fit.residual_sq + sigma * post.fit.trace_fit;

        let mut mean = DVector::zeros(total_blocks * t);
        let mut cov = vec![DMatrix::zeros(t, t); total_blocks];
        for (k, &i) in active.blocks.iter().enumerate() {
            mean.rows_mut(i * t, t).copy_from(&post.mu.rows(k * t, t));
            cov[i] = &post.blocks[k] * sigma;
        }
        out.mean.push(mean);
        out.cov_blocks.push(cov);
    }
    if !out.objective.is_finite() {
        return Err(NetinfError::numerical("marginal likelihood", format!("objective is {}", out.objective)));
    }
    Ok(out)
}

fn kernel_inverses(state: &KebState, t: usize) -> Result<Vec<TcDecomposition>> {
    state.beta.iter().map(|b| tc_inverse_decomposition(t, TcKernelParam::new(*b)?)).collect()
}

/// Posterior and objective of `problem` under `state`.
pub fn keb_posterior(problem: &RegressionProblem, state: &KebState) -> Result<KebPosterior> {
    let t = problem.trunc;
    let active = ActiveSet::new(problem, &state.gamma);
    posterior_on(&active, problem.block_count(), t, &state.gamma, &kernel_inverses(state, t)?, state.sigma)
}

/// EM update `gamma_i = sum_q trace(K_i^-1 (m_qi m_qi' + C_qii)) / (Q T)`.
pub fn em_gamma_update(post: &KebPosterior, kinv: &[TcDecomposition], trunc: usize) -> Vec<f64> {
    let q = post.mean.len().max(1) as f64;
    kinv.iter()
        .enumerate()
        .map(|(i, k)| {
            let tr: f64 = post
                .mean
                .iter()
                .zip(&post.cov_blocks)
                .map(|(m, c)| {
                    let mi = m.rows(i * trunc, trunc);
                    k.trace_product(&(&c[i] + mi * mi.transpose()))
                })
                .sum();
            tr.max(0.0) / (q * trunc as f64)
        })
        .collect()
}

/// One EM `gamma` step with arbitrary prior inverse factors `kinv`.
pub fn em_gamma_step(problem: &RegressionProblem, gamma: &[f64], kinv: &[TcDecomposition], sigma: f64) -> Result<Vec<f64>> {
    let active = ActiveSet::new(problem, gamma);
    let post = posterior_on(&active, problem.block_count(), problem.trunc, gamma, kinv, sigma)?;
    Ok(em_gamma_update(&post, kinv, problem.trunc))
}

/// `Q log|K(beta)| + Q T log(sum_j W_j(beta) alpha_j / (Q T))`: the prior part
/// of the EM objective with `gamma` profiled out.
fn beta_profile(beta: f64, alpha: &[f64], q: f64, w: &mut [f64]) -> f64 {
    let t = alpha.len();
    tc_weights_into(beta, w);
    let tr: f64 = w.iter().zip(alpha).map(|(w, a)| w * a).sum();
    q * tc_log_det_raw(t, beta) + q * t as f64 * (tr / (q * t as f64)).max(f64::MIN_POSITIVE).ln()
}

/// Minimises [`beta_profile`] on a grid, refines by golden section, and keeps
/// `current` unless the new point is better.
fn optimise_beta(alpha: &[f64], q: f64, current: f64, grid: usize) -> f64 {
    let mut w = vec![0.0; alpha.len()];
    let mut f = |b: f64| beta_profile(b, alpha, q, &mut w);
    let h = (BETA_MAX - BETA_MIN) / (grid - 1) as f64;
    let mut best = (current, f(current));
    for k in 0..grid {
        let b = BETA_MIN + h * k as f64;
        let v = f(b);
        if v < best.1 {
            best = (b, v);
        }
    }
    let (mut lo, mut hi) = ((best.0 - h).max(BETA_MIN), (best.0 + h).min(BETA_MAX));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..50 {
        let x1 = hi - g * (hi - lo);
        let x2 = lo + g * (hi - lo);
        if f(x1) <= f(x2) {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    let mid = 0.5 * (lo + hi);
    let fm = f(mid);
    if fm < best.1 {
        best = (mid, fm);
    }
    best.0
}

#[derive(Debug, Clone)]
pub struct KebOutcome {
    pub state: KebState,
    pub w_hat: Vec<DVector<f64>>,
    /// Input structure without the pruned link groups.
    pub selected: ModelStructure,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl KebOutcome {
    /// `sum_q ||m_q,b||` per block.
    pub fn block_norms(&self, trunc: usize) -> Vec<f64> {
        (0..self.state.blocks.len()).map(|i| self.w_hat.iter().map(|m| m.rows(i * trunc, trunc).norm()).sum()).collect()
    }

    /// Log marginal likelihood `-(objective + n log 2 pi) / 2`.
    pub fn log_marginal_likelihood(&self, rows: usize) -> f64 {
        -0.5 * (self.objective + rows as f64 * LN_2PI)
    }
}

/// EM until the relative objective decrease drops below `cfg.tol`.
pub fn run_keb(problem: &RegressionProblem, cfg: &KebConfig) -> Result<KebOutcome> {
    cfg.validate()?;
    run_keb_from(problem, cfg, KebState::initial(problem, cfg)?)
}

pub fn run_keb_from(problem: &RegressionProblem, cfg: &KebConfig, mut state: KebState) -> Result<KebOutcome> {
    cfg.validate()?;
    if state.blocks != problem.blocks {
        return Err(NetinfError::usage("initial state does not match the problem's blocks"));
    }
    let t = problem.trunc;
    let q = problem.experiments.len() as f64;
    let rows = problem.total_rows().max(1) as f64;
    let sigma_floor = 1e-14 * problem.experiments.iter().map(|e| e.y.norm_squared()).sum::<f64>() / rows;
    let sigma_floor = sigma_floor.max(f64::MIN_POSITIVE.sqrt());
    let mut active = ActiveSet::new(problem, &state.gamma);
    let mut converged = false;
    let mut iterations = 0;
    let post = loop {
        let kinv = kernel_inverses(&state, t)?;
        let post = posterior_on(&active, problem.block_count(), t, &state.gamma, &kinv, state.sigma)?;
        let prev = state.objective_trace.last().copied();
        state.objective_trace.push(post.objective);
        if let Some(prev) = prev {
            if prev - post.objective < cfg.tol * prev.abs() {
                converged = true;
                break post;
            }
        }
        if iterations == cfg.max_iter {
            break post;
        }
        iterations += 1;

        for &i in &active.blocks {
            let mut b = DMatrix::zeros(t, t);
            for (m, c) in post.mean.iter().zip(&post.cov_blocks) {
                let mi = m.rows(i * t, t);
                b += &c[i] + mi * mi.transpose();
            }
            let alpha: Vec<f64> = bidiag_quadratic_diag(&b).into_iter().map(|a| a.max(0.0)).collect();
            let beta = optimise_beta(&alpha, q, clamp_beta(state.beta[i]), cfg.beta_grid);
            let mut w = vec![0.0; t];
            tc_weights_into(beta, &mut w);
            let tr: f64 = w.iter().zip(&alpha).map(|(w, a)| w * a).sum();
            state.beta[i] = beta;
            state.gamma[i] = tr / (q * t as f64);
        }
        state.sigma = (post.expected_residual / rows).max(sigma_floor);

        let top = state.gamma.iter().cloned().fold(0.0, f64::max);
        let mut changed = false;
        for g in state.gamma.iter_mut() {
            if *g > 0.0 && *g < DEAD_GROUP * top {
                *g = 0.0;
                changed = true;
            }
        }
        if top == 0.0 {
            return Err(NetinfError::numerical("marginal likelihood", "every group scale collapsed to zero"));
        }
        if changed {
            active = ActiveSet::new(problem, &state.gamma);
        }
    };

    let top = state.gamma.iter().cloned().fold(0.0, f64::max);
    let kept: Vec<GroupId> = problem
        .blocks
        .iter()
        .zip(&state.gamma)
        .filter_map(|(b, g)| match b {
            Block::Link(id) if *g >= cfg.prune_threshold * top && *g > 0.0 => Some(*id),
            _ => None,
        })
        .collect();
    let selected = ModelStructure { groups: kept, ..problem.structure.clone() };
    Ok(KebOutcome { objective: post.objective, w_hat: post.mean, state, selected, converged, iterations })
}

/// Scores structures by the maximised log marginal likelihood.
#[derive(Debug, Clone, Default)]
pub struct KebScorer {
    pub config: KebConfig,
}

impl StructureScorer for KebScorer {
    fn method(&self) -> Method {
        Method::KebTc
    }

    fn fit(&self, problem: &RegressionProblem, _seed: u64, _parent: Option<&ScoredFit>) -> Result<ScoredFit> {
        let out = run_keb(problem, &self.config)?;
        Ok(ScoredFit {
            score: out.log_marginal_likelihood(problem.total_rows()),
            block_norms: out.block_norms(problem.trunc),
            w_hat: out.w_hat,
            factors: Vec::new(),
            pruned: problem.structure.groups.iter().filter(|g| !out.selected.groups.contains(g)).copied().collect(),
        })
    }
}
