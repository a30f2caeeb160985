//! Coordinate-ascent variational inference over `(w, sigma, lambda, beta)` for
//! one target node and one fixed model structure.
//!
//! The factorisation is `q(w, sigma) q(lambda) q(beta)`: a Gaussian-Gamma over
//! impulse responses and noise precision, independent Gammas over the group
//! precisions and a non-parametric `q(beta_i)` per group that is represented
//! by Metropolis-Hastings samples (or by quadrature moments).

use std::f64::consts::PI;

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{NetinfError, Result};
use crate::kernel::{bidiag_quadratic_diag, clamp_beta, tc_log_det_raw, tc_weights_into, TcDecomposition, BETA_MAX, BETA_MIN};
use crate::problem::{Block, ExperimentData, GroupId, RegressionProblem};
use crate::quad::{integrate_vec_with_breaks, QuadOptions};
use crate::seed::derive_seed;

/// Floor applied to `b_sigma` so that a perfect fit keeps `E[sigma]` finite.
pub const B_SIGMA_FLOOR: f64 = 1e-12;

/// How `E[K^-1]` is obtained from `q(beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaExpectation {
    #[default]
    MetropolisHastings,
    /// Deterministic adaptive quadrature of the exact moments.
    Quadrature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViConfig {
    pub a0: f64,
    pub b0: f64,
    pub max_iter: usize,
    /// Relative lower-bound increase below which iteration stops.
    pub tol: f64,
    pub n_mh_samples: usize,
    pub n_burn_in: usize,
    pub proposal_window: f64,
    pub quad_tol: f64,
    pub seed: u64,
    pub beta_expectation: BetaExpectation,
}

impl Default for ViConfig {
    fn default() -> Self {
        Self {
            a0: 1e-3,
            b0: 1e-3,
            max_iter: 50,
            tol: 1e-3,
            n_mh_samples: 500,
            n_burn_in: 100,
            proposal_window: 0.1,
            quad_tol: 1e-8,
            seed: 0,
            beta_expectation: BetaExpectation::MetropolisHastings,
        }
    }
}

impl ViConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(NetinfError::param(name, format!("{v} must be positive and finite")))
            }
        };
        positive("a0", self.a0)?;
        positive("b0", self.b0)?;
        positive("tol", self.tol)?;
        positive("quad_tol", self.quad_tol)?;
        if self.max_iter == 0 {
            return Err(NetinfError::param("max_iter", "must be at least 1"));
        }
        if self.n_mh_samples == 0 {
            return Err(NetinfError::param("n_mh_samples", "must be at least 1"));
        }
        if !(self.proposal_window > 0.0 && self.proposal_window < 1.0) {
            return Err(NetinfError::param("proposal_window", format!("{} is outside (0, 1)", self.proposal_window)));
        }
        Ok(())
    }
}

/// Variational factors of one column block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFactor {
    pub block: Block,
    pub a_lambda: f64,
    pub b_lambda: f64,
    /// Current sample set of `q(beta)` (the posterior mean in quadrature mode).
    pub beta_samples: Vec<f64>,
    /// `-log integral of p_hat(beta)` over `(0, 1)`.
    pub log_c: f64,
    /// `E[K^-1]` under `q(beta)`.
    pub mean_inverse: TcDecomposition,
    pub acceptance_rate: f64,
}

impl GroupFactor {
    pub fn e_lambda(&self) -> f64 {
        self.a_lambda / self.b_lambda
    }
}

/// Per-experiment quantities cached by the `(w, sigma)` update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub rows: usize,
    pub log_det_sigma: f64,
    /// `||Y - Phi mu||^2`.
    pub residual_sq: f64,
    /// `trace(Phi Sigma Phi')`.
    pub trace_fit: f64,
}

/// Full variational state. Only the diagonal `T x T` blocks of each `Sigma_q`
/// are kept; nothing downstream needs the cross-group covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViState {
    pub mu: Vec<DVector<f64>>,
    /// `sigma_blocks[q][i]` is block `i` of `Sigma_q`.
    pub sigma_blocks: Vec<Vec<DMatrix<f64>>>,
    pub fit: Vec<FitSummary>,
    pub a_sigma: f64,
    pub b_sigma: f64,
    pub groups: Vec<GroupFactor>,
    pub lower_bound_trace: Vec<f64>,
}

impl ViState {
    /// Neutral starting point: `E[lambda] = 1`, `E[K^-1]` at `beta = 0.5`.
    pub fn initial(problem: &RegressionProblem, cfg: &ViConfig) -> Result<Self> {
        let t = problem.trunc;
        let mut w = vec![0.0; t];
        tc_weights_into(0.5, &mut w);
        let start = TcDecomposition::from_weights(w)?;
        let groups = problem
            .blocks
            .iter()
            .map(|&block| GroupFactor {
                block,
                a_lambda: 1.0,
                b_lambda: 1.0,
                beta_samples: vec![0.5],
                log_c: 0.0,
                mean_inverse: start.clone(),
                acceptance_rate: 0.0,
            })
            .collect();
        let d = problem.columns();
        Ok(Self {
            mu: problem.experiments.iter().map(|_| DVector::zeros(d)).collect(),
            sigma_blocks: problem.experiments.iter().map(|_| vec![DMatrix::identity(t, t); problem.block_count()]).collect(),
            fit: problem
                .experiments
                .iter()
                .map(|e| FitSummary { rows: e.rows(), log_det_sigma: 0.0, residual_sq: 0.0, trace_fit: 0.0 })
                .collect(),
            a_sigma: cfg.a0,
            b_sigma: cfg.b0,
            groups,
            lower_bound_trace: Vec::new(),
        })
    }

    pub fn e_sigma(&self) -> f64 {
        self.a_sigma / self.b_sigma
    }

    /// `E[sigma] mu_qi mu_qi' + Sigma_qii`, the scaled second moment of block `i`.
    pub fn second_moment(&self, q: usize, i: usize) -> DMatrix<f64> {
        let t = self.sigma_blocks[q][i].nrows();
        let m = self.mu[q].rows(i * t, t);
        &self.sigma_blocks[q][i] + (m * m.transpose()) * self.e_sigma()
    }

    /// `sum_q ||mu_qi||` for every block.
    pub fn block_norms(&self) -> Vec<f64> {
        let t = self.sigma_blocks.first().and_then(|b| b.first()).map_or(0, |m| m.nrows());
        (0..self.groups.len()).map(|i| self.mu.iter().map(|m| m.rows(i * t, t).norm()).sum()).collect()
    }

    /// Impulse-response estimate averaged over experiments.
    pub fn mean_mu(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.mu.first().map_or(0, |m| m.len()));
        for m in &self.mu {
            acc += m;
        }
        if !self.mu.is_empty() {
            acc /= self.mu.len() as f64;
        }
        acc
    }

    /// JSON snapshot for debugging.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Unnormalised log density of `q(beta_i)`:
/// `-L/2 log|K(beta)| - E[lambda]/2 sum_j W_j(beta) alpha_j + log_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaTarget {
    pub n_experiments: usize,
    pub e_lambda: f64,
    /// `sum_q diag(U B_q U')` for the block second moments `B_q`.
    pub alpha: Vec<f64>,
    pub log_scale: f64,
}

impl BetaTarget {
    pub fn from_second_moments(e_lambda: f64, moments: &[DMatrix<f64>], dim: usize) -> Self {
        let mut alpha = vec![0.0; dim];
        for b in moments {
            for (a, v) in alpha.iter_mut().zip(bidiag_quadratic_diag(b)) {
                *a += v;
            }
        }
        // round-off in Sigma can push tiny entries negative
        alpha.iter_mut().for_each(|a| *a = a.max(0.0));
        Self { n_experiments: moments.len(), e_lambda, alpha, log_scale: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn log_density(&self, beta: f64) -> f64 {
        let b = clamp_beta(beta);
        let dim = self.dim();
        let one_minus = 1.0 - b;
        let inv = 1.0 / b;
        let mut inv_pow = 1.0;
        let mut quad = 0.0;
        for a in &self.alpha {
            inv_pow *= inv;
            quad += inv_pow * a;
        }
        // every W_j but the last carries an extra 1 / (1 - beta)
        let last = inv_pow * self.alpha.last().copied().unwrap_or(0.0);
        quad = (quad - last) / one_minus + last;
        self.log_scale - 0.5 * self.n_experiments as f64 * tc_log_det_raw(dim, b) - 0.5 * self.e_lambda * quad
    }
}

/// Support `(lo, hi)` of the uniform proposal from state `beta`.
pub fn proposal_window(beta: f64, eps: f64) -> (f64, f64) {
    if beta <= 0.5 * eps {
        (0.0, eps)
    } else if beta >= 1.0 - 0.5 * eps {
        (1.0 - eps, 1.0)
    } else {
        (beta - 0.5 * eps, beta + 0.5 * eps)
    }
}

/// `log q(to | from)` for the windowed uniform proposal.
pub fn log_proposal_density(to: f64, from: f64, eps: f64) -> f64 {
    let (lo, hi) = proposal_window(from, eps);
    if to > lo && to < hi {
        -eps.ln()
    } else {
        f64::NEG_INFINITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaChain {
    pub samples: Vec<f64>,
    /// Sample mean of the `W` factors, i.e. `E[K^-1]` in factored form.
    pub mean_w: Vec<f64>,
    pub accepted: usize,
    pub proposals: usize,
}

/// Runs a Metropolis-Hastings chain on `(0, 1)` targeting `target`.
pub fn mh_sample_beta<R: Rng + ?Sized>(
    target: &BetaTarget,
    start: f64,
    n_samples: usize,
    n_burn_in: usize,
    eps: f64,
    rng: &mut R,
) -> BetaChain {
    let dim = target.dim();
    let mut current = if start > 0.0 && start < 1.0 { start } else { 0.5 };
    let mut current_lp = target.log_density(current);
    let mut samples = Vec::with_capacity(n_samples);
    let mut mean_w = vec![0.0; dim];
    let mut w = vec![0.0; dim];
    let mut accepted = 0;
    let total = n_burn_in + n_samples;
    for step in 0..total {
        let (lo, hi) = proposal_window(current, eps);
        let mut proposal = rng.random_range(lo..hi);
        while proposal <= 0.0 {
            proposal = rng.random_range(lo..hi);
        }
        let back = log_proposal_density(current, proposal, eps);
        if back.is_finite() {
            let lp = target.log_density(proposal);
            let log_r = lp - current_lp + back - log_proposal_density(proposal, current, eps);
            if log_r >= 0.0 || rng.random::<f64>().ln() < log_r {
                current = proposal;
                current_lp = lp;
                accepted += 1;
            }
        }
        if step >= n_burn_in {
            samples.push(current);
            tc_weights_into(clamp_beta(current), &mut w);
            for (m, x) in mean_w.iter_mut().zip(&w) {
                *m += x;
            }
        }
    }
    if accepted == 0 && total > 0 {
        warn!("every beta proposal was rejected; chain stayed at {current}");
    }
    let n = n_samples.max(1) as f64;
    mean_w.iter_mut().for_each(|m| *m /= n);
    BetaChain { samples, mean_w, accepted, proposals: total }
}

/// Exact moments of `q(beta)` by adaptive quadrature.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaMoments {
    pub log_c: f64,
    pub mean_beta: f64,
    pub mean_w: Vec<f64>,
    pub converged: bool,
}

fn peak_of(target: &BetaTarget) -> (f64, f64) {
    const GRID: usize = 128;
    let mut best = (BETA_MIN, target.log_density(BETA_MIN));
    for k in 0..=GRID {
        let b = BETA_MIN + (BETA_MAX - BETA_MIN) * k as f64 / GRID as f64;
        let lp = target.log_density(b);
        if lp > best.1 {
            best = (b, lp);
        }
    }
    // golden-section refinement within one grid cell either side
    let h = (BETA_MAX - BETA_MIN) / GRID as f64;
    let (mut lo, mut hi) = ((best.0 - h).max(BETA_MIN), (best.0 + h).min(BETA_MAX));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..40 {
        let x1 = hi - g * (hi - lo);
        let x2 = lo + g * (hi - lo);
        if target.log_density(x1) >= target.log_density(x2) {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    let mid = 0.5 * (lo + hi);
    let lp = target.log_density(mid);
    if lp > best.1 {
        (mid, lp)
    } else {
        best
    }
}

/// Integrates `p_hat`, `beta p_hat` and `W_j p_hat` over `(0, 1)`.
pub fn beta_quadrature(target: &BetaTarget, quad_tol: f64) -> Result<BetaMoments> {
    integrate_beta(target, quad_tol, true)
}

fn integrate_beta(target: &BetaTarget, quad_tol: f64, moments: bool) -> Result<BetaMoments> {
    let dim = if moments { target.dim() } else { 0 };
    let (peak, shift) = peak_of(target);
    if !shift.is_finite() {
        return Err(NetinfError::numerical("beta normalisation", format!("log density peak is {shift}")));
    }
    // local width from the curvature at the peak, used to pin breakpoints
    let h = 1e-5;
    let curv = (target.log_density((peak + h).min(BETA_MAX)) - 2.0 * shift + target.log_density((peak - h).max(BETA_MIN)))
        / (h * h);
    let width = if curv < 0.0 { (1.0 / (-curv).sqrt()).clamp(1e-6, 0.05) } else { 0.05 };

    let mut breaks: Vec<f64> = (0..=16).map(|k| BETA_MIN + (BETA_MAX - BETA_MIN) * k as f64 / 16.0).collect();
    for s in [0.5, 1.0, 2.0, 4.0, 8.0] {
        breaks.push(peak - s * width);
        breaks.push(peak + s * width);
    }
    breaks.retain(|b| *b >= BETA_MIN && *b <= BETA_MAX);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let mut w = vec![0.0; dim];
    let mut eval = |beta: f64, out: &mut [f64]| {
        let p = (target.log_density(beta) - shift).exp();
        out[0] = p;
        if moments {
            out[1] = beta * p;
            tc_weights_into(clamp_beta(beta), &mut w);
            for (o, x) in out[2..].iter_mut().zip(&w) {
                *o = x * p;
            }
        }
    };
    let width_out = if moments { dim + 2 } else { 1 };
    let opts = QuadOptions { abs_tol: 0.0, rel_tol: quad_tol, initial_panels: 1, max_intervals: 4000 };
    let res = integrate_vec_with_breaks(&mut eval, width_out, &breaks, opts);
    let mut total = res.value;

    // the clamped density is flat on (0, BETA_MIN) and (BETA_MAX, 1)
    let mut edge = vec![0.0; width_out];
    for (b, len, first_moment) in [
        (BETA_MIN, BETA_MIN, 0.5 * BETA_MIN * BETA_MIN),
        (BETA_MAX, 1.0 - BETA_MAX, 0.5 * (1.0 - BETA_MAX * BETA_MAX)),
    ] {
        eval(b, &mut edge);
        total[0] += edge[0] * len;
        if !moments {
            continue;
        }
        total[1] += edge[0] * first_moment;
        for j in 0..dim {
            total[2 + j] += edge[2 + j] * len;
        }
    }
    if !res.converged {
        debug!("beta quadrature stopped after {} intervals before reaching {quad_tol}", res.intervals);
    }
    let z = total[0];
    if !(z.is_finite() && z > 0.0) {
        return Err(NetinfError::numerical("beta normalisation", format!("shifted integral is {z}")));
    }
    Ok(BetaMoments {
        log_c: -(shift + z.ln()),
        mean_beta: if moments { total[1] / z } else { f64::NAN },
        mean_w: total.iter().skip(2).map(|v| v / z).collect(),
        converged: res.converged,
    })
}

/// `log c = -log integral_0^1 p_hat(beta) d beta`.
pub fn normalization_constant(target: &BetaTarget, quad_tol: f64) -> Result<f64> {
    Ok(integrate_beta(target, quad_tol, false)?.log_c)
}

/// Per-experiment products that do not change across iterations.
pub(crate) struct ExperimentCache {
    phi_t_y: DVector<f64>,
    y_t_y: f64,
    /// Present when the information form (`D <= n`) is used.
    phi_t_phi: Option<DMatrix<f64>>,
}

pub(crate) fn build_cache(problem: &RegressionProblem) -> Vec<ExperimentCache> {
    problem
        .experiments
        .iter()
        .map(|e| ExperimentCache {
            phi_t_y: e.phi.tr_mul(&e.y),
            y_t_y: e.y.norm_squared(),
            phi_t_phi: (e.phi.ncols() <= e.rows()).then(|| e.phi.tr_mul(&e.phi)),
        })
        .collect()
}

pub(crate) fn cholesky_with_jitter(a: DMatrix<f64>, context: &'static str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = a.clone().cholesky() {
        return Ok(c);
    }
    let diag: Vec<f64> = a.diagonal().iter().copied().collect();
    let mut eps = 1e-12;
    while eps <= 1e-4 {
        let mut b = a.clone();
        for (j, d) in diag.iter().enumerate() {
            b[(j, j)] += eps * d.abs().max(f64::MIN_POSITIVE);
        }
        if let Some(c) = b.cholesky() {
            debug!("{context}: cholesky needed relative jitter {eps:e}");
            return Ok(c);
        }
        eps *= 100.0;
    }
    let lo = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Err(NetinfError::numerical(
        context,
        format!("cholesky of {n}x{n} matrix failed after jitter up to 1e-4 (diagonal range [{lo:e}, {hi:e}])", n = diag.len()),
    ))
}

/// `x <- (e_lambda U' W U)^-1 x` by one prefix and one suffix sum.
pub(crate) fn apply_prior_inverse(k: &TcDecomposition, e_lambda: f64, x: &mut [f64]) {
    let w = k.w_diag();
    let mut acc = 0.0;
    for (xj, wj) in x.iter_mut().zip(w) {
        acc += *xj;
        *xj = acc / wj;
    }
    let mut acc = 0.0;
    for xj in x.iter_mut().rev() {
        acc += *xj;
        *xj = acc / e_lambda;
    }
}

pub(crate) struct Posterior {
    pub(crate) mu: DVector<f64>,
    pub(crate) blocks: Vec<DMatrix<f64>>,
    pub(crate) fit: FitSummary,
    pub(crate) quad_y: f64,
}

/// Posterior of `w` for one experiment under prior precision
/// `blockdiag(e_lambda_i U' W_i U)`.
pub(crate) fn posterior(data: &ExperimentData, cache: &ExperimentCache, prior: &[(f64, &TcDecomposition)], t: usize) -> Result<Posterior> {
    let d = prior.len() * t;
    let n = data.rows();
    let (mu, blocks, log_det) = if d == 0 {
        (DVector::zeros(0), Vec::new(), 0.0)
    } else if let Some(ptp) = &cache.phi_t_phi {
        let mut a = ptp.clone();
        for (i, (el, k)) in prior.iter().enumerate() {
            let off = i * t;
            let w = k.w_diag();
            for j in 0..t {
                a[(off + j, off + j)] += el * (w[j] + if j > 0 { w[j - 1] } else { 0.0 });
                if j + 1 < t {
                    a[(off + j, off + j + 1)] -= el * w[j];
                    a[(off + j + 1, off + j)] -= el * w[j];
                }
            }
        }
        let chol = cholesky_with_jitter(a, "posterior precision")?;
        let mu = chol.solve(&cache.phi_t_y);
        let l = chol.l();
        let log_det = -2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let linv = l
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| NetinfError::numerical("posterior precision", "singular triangular factor"))?;
        let blocks = (0..prior.len())
            .map(|i| {
                let s = i * t;
                let v = linv.view((s, s), (d - s, t));
                v.tr_mul(&v)
            })
            .collect();
        (mu, blocks, log_det)
    } else {
        // Woodbury: Sigma = P^-1 - P^-1 Phi' M^-1 Phi P^-1 with M = I + Phi P^-1 Phi'
        let mut gt = DMatrix::zeros(d, n);
        let mut buf = vec![0.0; t];
        for (i, (el, k)) in prior.iter().enumerate() {
            let off = i * t;
            for r in 0..n {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = data.phi[(r, off + j)];
                }
                apply_prior_inverse(k, *el, &mut buf);
                for (j, b) in buf.iter().enumerate() {
                    gt[(off + j, r)] = *b;
                }
            }
        }
        let mut m = &data.phi * &gt;
        for j in 0..n {
            m[(j, j)] += 1.0;
        }
        let chol = cholesky_with_jitter(m, "posterior evidence matrix")?;
        let mu = &gt * chol.solve(&data.y);
        let l = chol.l();
        let c = l
            .solve_lower_triangular(&gt.transpose())
            .ok_or_else(|| NetinfError::numerical("posterior evidence matrix", "singular triangular factor"))?;
        let mut log_det = -2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let blocks = prior
            .iter()
            .enumerate()
            .map(|(i, (el, k))| {
                log_det -= t as f64 * el.ln() + k.log_det();
                let ci = c.columns(i * t, t);
                k.inverse_dense() / *el - ci.tr_mul(&ci)
            })
            .collect();
        (mu, blocks, log_det)
    };
    let trace_prior: f64 = prior.iter().zip(&blocks).map(|((el, k), s)| el * k.trace_product(s)).sum();
    let residual_sq = if d == 0 { cache.y_t_y } else { (&data.y - &data.phi * &mu).norm_squared() };
    let quad_y = if d == 0 { 0.0 } else { mu.dot(&cache.phi_t_y) };
    Ok(Posterior {
        mu,
        blocks,
        fit: FitSummary { rows: n, log_det_sigma: log_det, residual_sq, trace_fit: (d as f64 - trace_prior).max(0.0) },
        quad_y,
    })
}

fn update_w_sigma_cached(problem: &RegressionProblem, cache: &[ExperimentCache], state: &mut ViState, cfg: &ViConfig) -> Result<()> {
    let t = problem.trunc;
    let prior: Vec<(f64, &TcDecomposition)> = state.groups.iter().map(|g| (g.e_lambda(), &g.mean_inverse)).collect();
    let mut b_sigma = cfg.b0;
    let mut rows = 0;
    let mut mus = Vec::with_capacity(cache.len());
    let mut blocks = Vec::with_capacity(cache.len());
    let mut fits = Vec::with_capacity(cache.len());
    for (data, c) in problem.experiments.iter().zip(cache) {
        let post = posterior(data, c, &prior, t)?;
        b_sigma += 0.5 * (c.y_t_y - post.quad_y);
        rows += data.rows();
        mus.push(post.mu);
        blocks.push(post.blocks);
        fits.push(post.fit);
    }
    state.mu = mus;
    state.sigma_blocks = blocks;
    state.fit = fits;
    state.a_sigma = 0.5 * rows as f64 + cfg.a0;
    state.b_sigma = b_sigma.max(B_SIGMA_FLOOR);
    Ok(())
}

/// Gaussian-Gamma update of `q(w, sigma)` given the current `q(lambda)` and `E[K^-1]`.
pub fn update_w_sigma(problem: &RegressionProblem, state: &mut ViState, cfg: &ViConfig) -> Result<()> {
    update_w_sigma_cached(problem, &build_cache(problem), state, cfg)
}

/// Gamma update of every `q(lambda_i)`.
pub fn update_lambda(problem: &RegressionProblem, state: &mut ViState, cfg: &ViConfig) {
    let l = problem.experiments.len() as f64;
    let t = problem.trunc as f64;
    for i in 0..state.groups.len() {
        let tr: f64 = (0..state.mu.len()).map(|q| state.groups[i].mean_inverse.trace_product(&state.second_moment(q, i))).sum();
        let g = &mut state.groups[i];
        g.a_lambda = 0.5 * l * t + cfg.a0;
        g.b_lambda = cfg.b0 + 0.5 * tr.max(0.0);
    }
}

/// Target density of `q(beta_i)` implied by the current state.
pub fn beta_target(state: &ViState, i: usize) -> BetaTarget {
    let moments: Vec<DMatrix<f64>> = (0..state.mu.len()).map(|q| state.second_moment(q, i)).collect();
    let dim = state.groups[i].mean_inverse.dim();
    BetaTarget::from_second_moments(state.groups[i].e_lambda(), &moments, dim)
}

/// Independent RNG stream per block, stable under removal of other blocks.
pub fn group_rngs(problem: &RegressionProblem, seed: u64) -> Vec<ChaCha8Rng> {
    problem
        .blocks
        .iter()
        .map(|b| {
            let stream = match b {
                Block::Own => 0,
                Block::Link(GroupId::Node(j)) => 1 + *j as u64,
                Block::Link(GroupId::Input(j)) => (1 << 32) + *j as u64,
            };
            ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
        })
        .collect()
}

/// Update of every `q(beta_i)`, its normalisation constant and `E[K_i^-1]`.
pub fn update_beta(state: &mut ViState, cfg: &ViConfig, rngs: &mut [ChaCha8Rng]) -> Result<()> {
    for i in 0..state.groups.len() {
        let target = beta_target(state, i);
        let g = &mut state.groups[i];
        match cfg.beta_expectation {
            BetaExpectation::MetropolisHastings => {
                let start = g.beta_samples.last().copied().unwrap_or(0.5);
                let chain = mh_sample_beta(&target, start, cfg.n_mh_samples, cfg.n_burn_in, cfg.proposal_window, &mut rngs[i]);
                g.mean_inverse = TcDecomposition::from_weights(chain.mean_w)?;
                g.acceptance_rate = chain.accepted as f64 / chain.proposals.max(1) as f64;
                g.beta_samples = chain.samples;
                g.log_c = normalization_constant(&target, cfg.quad_tol)?;
            }
            BetaExpectation::Quadrature => {
                let m = beta_quadrature(&target, cfg.quad_tol)?;
                g.mean_inverse = TcDecomposition::from_weights(m.mean_w)?;
                g.beta_samples = vec![m.mean_beta];
                g.acceptance_rate = 1.0;
                g.log_c = m.log_c;
            }
        }
    }
    Ok(())
}

/// Named terms of the evidence lower bound.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    /// `1/2 sum_q log|Sigma_q|`.
    pub log_det_sigma: f64,
    /// `-1/2 E[sigma] sum_q ||Y_q - Phi_q mu_q||^2`.
    pub data_fit: f64,
    /// `-1/2 sum_q trace(Phi_q Sigma_q Phi_q')`.
    pub trace_fit: f64,
    /// `-sum_q n_q/2 log(2 pi)`.
    pub gaussian_constant: f64,
    /// Expected log prior minus entropy of `q(sigma)`.
    pub sigma: f64,
    /// `sum_q D_q / 2` from the Gaussian entropy.
    pub dimension: f64,
    /// Expected log prior minus entropy of every `q(lambda_i)`.
    pub lambda: f64,
    /// `-sum_i log c_i`.
    pub beta: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.log_det_sigma
            + self.data_fit
            + self.trace_fit
            + self.gaussian_constant
            + self.sigma
            + self.dimension
            + self.lambda
            + self.beta
    }

    fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("log_det_sigma", self.log_det_sigma),
            ("data_fit", self.data_fit),
            ("trace_fit", self.trace_fit),
            ("gaussian_constant", self.gaussian_constant),
            ("sigma", self.sigma),
            ("dimension", self.dimension),
            ("lambda", self.lambda),
            ("beta", self.beta),
        ]
    }
}

fn gamma_terms(a: f64, b: f64, a0: f64, b0: f64) -> f64 {
    -b0 * a / b - a * b.ln() + a + ln_gamma(a) + a0 * b0.ln() - ln_gamma(a0)
}

/// Evidence lower bound of the current state.
///
/// The `lambda`/`beta` prior cross terms cancel against the entropy of
/// `q(beta)`, so the value is exact only when `q(beta)` was updated last.
pub fn lower_bound(problem: &RegressionProblem, state: &ViState, cfg: &ViConfig) -> Result<BoundTerms> {
    let s = state.e_sigma();
    let mut terms = BoundTerms::default();
    for f in &state.fit {
        terms.log_det_sigma += 0.5 * f.log_det_sigma;
        terms.data_fit -= 0.5 * s * f.residual_sq;
        terms.trace_fit -= 0.5 * f.trace_fit;
        terms.gaussian_constant -= 0.5 * f.rows as f64 * (2.0 * PI).ln();
    }
    terms.sigma = gamma_terms(state.a_sigma, state.b_sigma, cfg.a0, cfg.b0);
    terms.dimension = 0.5 * (problem.columns() * state.fit.len()) as f64;
    terms.lambda = state.groups.iter().map(|g| gamma_terms(g.a_lambda, g.b_lambda, cfg.a0, cfg.b0)).sum();
    terms.beta = -state.groups.iter().map(|g| g.log_c).sum::<f64>();
    if let Some((name, v)) = terms.named().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(NetinfError::numerical("lower bound", format!("term `{name}` is {v}")));
    }
    Ok(terms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViOutcome {
    pub state: ViState,
    /// `mu_q` for every experiment.
    pub w_hat: Vec<DVector<f64>>,
    pub lower_bound: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Coordinate ascent until the relative bound increase drops below `cfg.tol`.
pub fn run_vi(problem: &RegressionProblem, cfg: &ViConfig) -> Result<ViOutcome> {
    run_vi_from(problem, cfg, &[])
}

/// [`run_vi`] with `q(lambda)` and `q(beta)` of matching blocks taken from
/// `warm` (typically a fit of a larger nested structure).
pub fn run_vi_from(problem: &RegressionProblem, cfg: &ViConfig, warm: &[GroupFactor]) -> Result<ViOutcome> {
    cfg.validate()?;
    let cache = build_cache(problem);
    let mut state = ViState::initial(problem, cfg)?;
    for g in state.groups.iter_mut() {
        if let Some(w) = warm.iter().find(|w| w.block == g.block && w.mean_inverse.dim() == g.mean_inverse.dim()) {
            *g = w.clone();
        }
    }
    let mut rngs = group_rngs(problem, cfg.seed);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        update_w_sigma_cached(problem, &cache, &mut state, cfg)?;
        update_lambda(problem, &mut state, cfg);
        update_beta(&mut state, cfg, &mut rngs)?;
        let bound = lower_bound(problem, &state, cfg)?.total();
        let prev = state.lower_bound_trace.last().copied();
        state.lower_bound_trace.push(bound);
        if let Some(prev) = prev {
            if bound - prev < cfg.tol * prev.abs() {
                converged = true;
                break;
            }
        }
    }
    let lower_bound = *state.lower_bound_trace.last().expect("at least one iteration");
    Ok(ViOutcome { w_hat: state.mu.clone(), state, lower_bound, converged, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{tc_inverse_decomposition, TcKernelParam};
    use crate::netsim::{Experiment, NoiseSetting};
    use crate::problem::{assemble, ModelStructure};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn manual_problem(y: Vec<f64>, phi: DMatrix<f64>, t: usize) -> RegressionProblem {
        let blocks = phi.ncols() / t;
        let groups = (0..blocks).map(GroupId::Input).collect();
        let structure = ModelStructure { target: 0, include_own: false, groups };
        RegressionProblem {
            blocks: structure.blocks(),
            structure,
            trunc: t,
            experiments: vec![ExperimentData { y: DVector::from_vec(y), phi }],
        }
    }

    fn random_problem(rows: usize, blocks: usize, t: usize, seed: u64) -> RegressionProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = DMatrix::from_fn(rows, blocks * t, |_, _| rng.random_range(-1.0..1.0));
        let y = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        manual_problem(y, phi, t)
    }

    fn dense_prior(state: &ViState, t: usize) -> DMatrix<f64> {
        let d = state.groups.len() * t;
        let mut p = DMatrix::zeros(d, d);
        for (i, g) in state.groups.iter().enumerate() {
            p.view_mut((i * t, i * t), (t, t)).copy_from(&(g.mean_inverse.to_dense() * g.e_lambda()));
        }
        p
    }

    #[test]
    fn a_sigma_counts_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = DMatrix::from_fn(2, 100, |_, _| rng.random_range(-1.0..1.0));
        let exp = Experiment::new(y, DMatrix::zeros(0, 100), NoiseSetting::NoNoise).unwrap();
        let prob = assemble(&[exp], &ModelStructure::full(0, 2, 0), 20).unwrap();
        let cfg = ViConfig::default();
        let mut state = ViState::initial(&prob, &cfg).unwrap();
        update_w_sigma(&prob, &mut state, &cfg).unwrap();
        assert_relative_eq!(state.a_sigma, 40.001, epsilon = 1e-12);
        update_lambda(&prob, &mut state, &cfg);
        assert_relative_eq!(state.groups[0].a_lambda, 10.001, epsilon = 1e-12);
    }

    #[test]
    fn zero_regressors_give_zero_mean() {
        let y = vec![1.0, -2.0, 0.5, 3.0];
        let prob = manual_problem(y.clone(), DMatrix::zeros(4, 2), 2);
        let cfg = ViConfig::default();
        let mut state = ViState::initial(&prob, &cfg).unwrap();
        update_w_sigma(&prob, &mut state, &cfg).unwrap();
        assert!(state.mu[0].iter().all(|v| *v == 0.0));
        let yty: f64 = y.iter().map(|v| v * v).sum();
        assert_relative_eq!(state.b_sigma, cfg.b0 + 0.5 * yty, epsilon = 1e-12);
    }

    fn check_against_dense(prob: &RegressionProblem, state: &mut ViState) {
        let cfg = ViConfig::default();
        let t = prob.trunc;
        // non-trivial prior
        for (i, g) in state.groups.iter_mut().enumerate() {
            g.a_lambda = 2.0 + i as f64;
            g.b_lambda = 1.5;
            g.mean_inverse = tc_inverse_decomposition(t, TcKernelParam::new(0.3 + 0.2 * i as f64).unwrap()).unwrap();
        }
        update_w_sigma(prob, state, &cfg).unwrap();
        let e = &prob.experiments[0];
        let prec = e.phi.tr_mul(&e.phi) + dense_prior(state, t);
        let sigma = prec.clone().try_inverse().unwrap();
        let mu = &sigma * e.phi.tr_mul(&e.y);
        for (a, b) in state.mu[0].iter().zip(mu.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-9, max_relative = 1e-9);
        }
        for i in 0..prob.block_count() {
            let dense = sigma.view((i * t, i * t), (t, t));
            for (a, b) in state.sigma_blocks[0][i].iter().zip(dense.iter()) {
                assert_relative_eq!(a, b, epsilon = 1e-9, max_relative = 1e-9);
            }
        }
        assert_relative_eq!(state.fit[0].log_det_sigma, -prec.determinant().ln(), epsilon = 1e-9);
        let trace = (&e.phi * &sigma * e.phi.transpose()).trace();
        assert_relative_eq!(state.fit[0].trace_fit, trace, epsilon = 1e-9);
    }

    #[test]
    fn information_form_matches_dense_solve() {
        let prob = manual_problem(
            vec![0.3, -1.2, 0.8],
            DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.4, 1.0, 0.2, -0.7]),
            2,
        );
        let mut state = ViState::initial(&prob, &ViConfig::default()).unwrap();
        check_against_dense(&prob, &mut state);
    }

    #[test]
    fn woodbury_form_matches_dense_solve() {
        let prob = random_problem(4, 3, 2, 8);
        assert!(prob.columns() > prob.total_rows());
        let mut state = ViState::initial(&prob, &ViConfig::default()).unwrap();
        check_against_dense(&prob, &mut state);
    }

    #[test]
    fn prior_inverse_application() {
        let k = tc_inverse_decomposition(6, TcKernelParam::new(0.7).unwrap()).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0, 0.3, 0.0, 4.0, 1.5]);
        let expected = k.inverse_dense() * &x / 2.5;
        let mut v: Vec<f64> = x.iter().copied().collect();
        apply_prior_inverse(&k, 2.5, &mut v);
        for (a, b) in v.iter().zip(expected.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_block_leaves_b_lambda_at_prior() {
        let prob = manual_problem(vec![1.0, 2.0, 3.0], DMatrix::zeros(3, 2), 2);
        let cfg = ViConfig::default();
        let mut state = ViState::initial(&prob, &cfg).unwrap();
        state.sigma_blocks[0][0] = DMatrix::zeros(2, 2);
        update_lambda(&prob, &mut state, &cfg);
        assert_eq!(state.groups[0].b_lambda, cfg.b0);
        assert!(state.groups[0].e_lambda() > 1e3);
    }

    #[test]
    fn b_lambda_trace_matches_dense() {
        let prob = random_problem(6, 2, 3, 2);
        let cfg = ViConfig::default();
        let mut state = ViState::initial(&prob, &cfg).unwrap();
        update_w_sigma(&prob, &mut state, &cfg).unwrap();
        state.groups[1].mean_inverse = TcDecomposition::from_weights(vec![2.0, 0.5, 3.0]).unwrap();
        update_lambda(&prob, &mut state, &cfg);
        let s = state.e_sigma();
        let m = state.mu[0].rows(3, 3);
        let b = &state.sigma_blocks[0][1] + (m * m.transpose()) * s;
        let dense = (state.groups[1].mean_inverse.to_dense() * b).trace();
        assert_relative_eq!(state.groups[1].b_lambda, cfg.b0 + 0.5 * dense, max_relative = 1e-12);
    }

    #[test]
    fn interior_proposals_are_symmetric() {
        let eps = 0.1;
        for (a, b) in [(0.3, 0.33), (0.5, 0.46), (0.9, 0.94)] {
            assert_eq!(log_proposal_density(a, b, eps), log_proposal_density(b, a, eps));
        }
        // boundary-shifted window from 0.02 covers (0, 0.1), but 0.02 is not
        // reachable back from 0.09
        assert!(log_proposal_density(0.09, 0.02, eps).is_finite());
        assert_eq!(log_proposal_density(0.02, 0.09, eps), f64::NEG_INFINITY);
        assert_eq!(proposal_window(0.99, eps), (0.9, 1.0));
    }

    fn concentrated_target() -> BetaTarget {
        // 40 replicated second moments equal to K(0.8)
        let k = crate::kernel::tc_kernel_matrix(20, TcKernelParam::new(0.8).unwrap());
        let moments = vec![k; 40];
        BetaTarget::from_second_moments(1.0, &moments, 20)
    }

    #[test]
    fn mh_mean_matches_quadrature() {
        let target = concentrated_target();
        let exact = beta_quadrature(&target, 1e-10).unwrap();
        assert!((exact.mean_beta - 0.8).abs() < 0.02, "{}", exact.mean_beta);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let chain = mh_sample_beta(&target, 0.5, 4000, 500, 0.1, &mut rng);
        let mean = chain.samples.iter().sum::<f64>() / chain.samples.len() as f64;
        // batch-means standard error
        let batch = 200;
        let means: Vec<f64> = chain.samples.chunks(batch).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (means.len() - 1) as f64;
        let se = (var / means.len() as f64).sqrt();
        assert!((mean - exact.mean_beta).abs() < 0.05);
        assert!((mean - exact.mean_beta).abs() < 3.0 * se.max(1e-4), "{mean} vs {} (se {se})", exact.mean_beta);
    }

    #[test]
    fn mh_is_deterministic() {
        let target = concentrated_target();
        let a = mh_sample_beta(&target, 0.5, 300, 50, 0.1, &mut ChaCha8Rng::seed_from_u64(5));
        let b = mh_sample_beta(&target, 0.5, 300, 50, 0.1, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert!(a.samples.iter().all(|s| *s > 0.0 && *s < 1.0));
    }

    #[test]
    fn flat_density_normalises_to_one() {
        let target = BetaTarget { n_experiments: 0, e_lambda: 1.0, alpha: vec![0.0; 5], log_scale: 0.0 };
        assert!(normalization_constant(&target, 1e-10).unwrap().abs() < 1e-12);
    }

    #[test]
    fn scaling_shifts_log_c() {
        let mut target = concentrated_target();
        let base = normalization_constant(&target, 1e-10).unwrap();
        target.log_scale = 3.7f64.ln();
        let scaled = normalization_constant(&target, 1e-10).unwrap();
        assert_relative_eq!(scaled, base - 3.7f64.ln(), epsilon = 1e-8);
    }

    #[test]
    fn scalar_kernel_matches_riemann_sum() {
        let alpha = 0.05;
        let target = BetaTarget { n_experiments: 1, e_lambda: 1.0, alpha: vec![alpha], log_scale: 0.0 };
        let n = 1_000_000;
        let h = 1.0 / n as f64;
        let riemann: f64 = (0..n)
            .map(|k| {
                let b = ((k as f64 + 0.5) * h).clamp(1e-4, 1.0 - 1e-4);
                b.powf(-0.5) * (-alpha / (2.0 * b)).exp() * h
            })
            .sum();
        let log_c = normalization_constant(&target, 1e-10).unwrap();
        assert!(((-log_c).exp() - riemann).abs() < 1e-6, "{} vs {riemann}", (-log_c).exp());
    }

    #[test]
    fn bound_is_deterministic_and_empty_model_is_hand_computable() {
        let y = vec![0.5, -1.0, 2.0, 0.25, -0.75];
        let prob = manual_problem(y.clone(), DMatrix::zeros(5, 0), 1);
        let cfg = ViConfig::default();
        let out = run_vi(&prob, &cfg).unwrap();
        assert!(out.iterations <= 2 && out.converged);
        let a = lower_bound(&prob, &out.state, &cfg).unwrap();
        let b = lower_bound(&prob, &out.state.clone(), &cfg).unwrap();
        assert_eq!(a, b);

        let yty: f64 = y.iter().map(|v| v * v).sum();
        let a_s = 2.5 + cfg.a0;
        let b_s = cfg.b0 + 0.5 * yty;
        let s = a_s / b_s;
        let hand = -0.5 * s * yty - 2.5 * (2.0 * PI).ln() - cfg.b0 * s - a_s * b_s.ln()
            + a_s
            + ln_gamma(a_s)
            + cfg.a0 * cfg.b0.ln()
            - ln_gamma(cfg.a0);
        assert_relative_eq!(a.total(), hand, max_relative = 1e-12);
    }

    #[test]
    fn noiseless_single_lag_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 200;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut y = DMatrix::zeros(2, n);
        for t in 0..n {
            y[(1, t)] = x[t];
            if t > 0 {
                y[(0, t)] = 0.5 * x[t - 1];
            }
        }
        let exp = Experiment::new(y, DMatrix::zeros(0, n), NoiseSetting::NoNoise).unwrap();
        let s = ModelStructure::new(0, false, vec![GroupId::Node(1)]).unwrap();
        let prob = assemble(&[exp], &s, 20).unwrap();
        let out = run_vi(&prob, &ViConfig { seed: 4, ..Default::default() }).unwrap();
        let w = &out.w_hat[0];
        assert!((w[0] - 0.5).abs() < 0.05, "{}", w[0]);
        assert!(w.rows(1, 19).norm() < 0.05);

        let again = run_vi(&prob, &ViConfig { seed: 4, ..Default::default() }).unwrap();
        assert_eq!(out.w_hat, again.w_hat);
    }

    #[test]
    fn state_serialises() {
        let prob = random_problem(8, 1, 2, 1);
        let out = run_vi(&prob, &ViConfig { max_iter: 2, ..Default::default() }).unwrap();
        let json = out.state.to_json().unwrap();
        let back: ViState = serde_json::from_str(&json).unwrap();
        assert_eq!(back.groups.len(), 1);
        assert_eq!(back.lower_bound_trace, out.state.lower_bound_trace);
    }

    #[test]
    fn config_validation() {
        assert!(ViConfig::default().validate().is_ok());
        assert!(ViConfig { a0: 0.0, ..Default::default() }.validate().is_err());
        assert!(ViConfig { proposal_window: 1.0, ..Default::default() }.validate().is_err());
        assert!(ViConfig { max_iter: 0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn factors_stay_valid(seed in 0u64..10_000, rows in 3usize..12, blocks in 1usize..4) {
            let prob = random_problem(rows, blocks, 3, seed);
            let cfg = ViConfig { max_iter: 4, n_mh_samples: 50, n_burn_in: 10, seed, ..Default::default() };
            let out = run_vi(&prob, &cfg).unwrap();
            let st = &out.state;
            prop_assert!(st.a_sigma > 0.0 && st.b_sigma > 0.0);
            for g in &st.groups {
                prop_assert!(g.a_lambda > 0.0 && g.b_lambda > 0.0);
                prop_assert!(g.beta_samples.iter().all(|b| *b > 0.0 && *b < 1.0));
            }
            for s in &st.sigma_blocks[0] {
                prop_assert!((s - s.transpose()).amax() <= 1e-9 * s.amax().max(1e-300));
                prop_assert!(s.clone().cholesky().is_some());
            }
        }
    }
}
