//! Backward-selection structure search and network assembly.
//!
//! For every target node the full structure is fitted first. Link groups are
//! then ranked by `sum_q ||w_q,g||` and removed cumulatively from the weakest
//! up; the structure with the highest score wins. The target's own-lag block
//! is always present and never ranked or removed.

use log::warn;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{NetinfError, Result};
use crate::netsim::{DsfStructure, Experiment};
use crate::problem::{assemble, Block, GroupId, ModelStructure, RegressionProblem, DEFAULT_TRUNCATION};
use crate::seed::derive_seed;
use crate::vi::{run_vi_from, GroupFactor, ViConfig};

/// Relative tolerance under which two scores count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "vi")]
    Vi,
    #[serde(rename = "keb-tc")]
    KebTc,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Vi => "vi",
            Method::KebTc => "keb-tc",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = NetinfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vi" => Ok(Method::Vi),
            "keb" | "keb-tc" => Ok(Method::KebTc),
            other => Err(NetinfError::param("method", format!("unknown method `{other}` (expected vi or keb)"))),
        }
    }
}

/// Result of fitting one candidate structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredFit {
    /// Larger is better; evidence bound or log marginal likelihood.
    pub score: f64,
    /// `sum_q ||w_q,b||` per column block, in `problem.blocks` order.
    pub block_norms: Vec<f64>,
    pub w_hat: Vec<DVector<f64>>,
    /// Variational group factors, reused to start nested candidates.
    pub factors: Vec<GroupFactor>,
    /// Link groups the scorer itself switched off (their weights are zero).
    pub pruned: Vec<GroupId>,
}

/// Scores candidate structures for backward selection.
pub trait StructureScorer: Sync {
    fn method(&self) -> Method;

    /// `parent` is the last successful fit of a superset structure, if any.
    fn fit(&self, problem: &RegressionProblem, seed: u64, parent: Option<&ScoredFit>) -> Result<ScoredFit>;
}

/// Scores structures by the variational evidence lower bound.
#[derive(Debug, Clone, Default)]
pub struct VariationalScorer {
    pub config: ViConfig,
}

impl StructureScorer for VariationalScorer {
    fn method(&self) -> Method {
        Method::Vi
    }

    fn fit(&self, problem: &RegressionProblem, seed: u64, parent: Option<&ScoredFit>) -> Result<ScoredFit> {
        let cfg = ViConfig { seed, ..self.config.clone() };
        let out = run_vi_from(problem, &cfg, parent.map_or(&[][..], |p| &p.factors))?;
        Ok(ScoredFit {
            score: out.lower_bound,
            block_norms: out.state.block_norms(),
            w_hat: out.w_hat,
            factors: out.state.groups,
            pruned: Vec::new(),
        })
    }
}

mod score_serde {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

/// One evaluated structure. Failed fits carry a score of `-inf` (`null` in JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub structure: ModelStructure,
    #[serde(with = "score_serde")]
    pub lower_bound: f64,
    /// Group removed relative to the previous step.
    pub removed_group: Option<GroupId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub target: usize,
    /// Link-group confidences from the full fit, in removal order.
    pub confidences: Vec<(GroupId, f64)>,
    pub steps: Vec<SelectionStep>,
    pub chosen: usize,
    /// Chosen structure's impulse responses averaged over experiments
    /// (own block first).
    pub w_mean: Vec<f64>,
    /// Per-block confidences of the chosen fit, aligned with its blocks.
    pub chosen_norms: Vec<f64>,
    /// Groups of the chosen structure that its fit pruned; not reported as links.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pruned: Vec<GroupId>,
}

impl SelectionTrace {
    pub fn chosen_structure(&self) -> &ModelStructure {
        &self.steps[self.chosen].structure
    }
}

/// Index of the best score; near-ties go to the later (sparser) entry.
pub fn argmax_prefer_sparse(scores: &[f64]) -> Option<usize> {
    let best = scores.iter().cloned().filter(|s| !s.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    if scores.is_empty() {
        return None;
    }
    if best == f64::NEG_INFINITY {
        return Some(scores.len() - 1);
    }
    let floor = best - TIE_TOLERANCE * best.abs();
    scores.iter().rposition(|s| *s >= floor)
}

/// Ascending removal order; ties keep structure order.
pub fn removal_order(groups: &[GroupId], confidences: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..groups.len()).collect();
    idx.sort_by(|&a, &b| confidences[a].total_cmp(&confidences[b]).then(a.cmp(&b)));
    idx
}

fn mean_w(w: &[DVector<f64>]) -> Vec<f64> {
    let len = w.first().map_or(0, |v| v.len());
    let mut acc = vec![0.0; len];
    for v in w {
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += x;
        }
    }
    let n = w.len().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Algorithm-2 style backward selection for one target.
pub fn backward_select<S: StructureScorer + ?Sized>(
    experiments: &[Experiment],
    target: usize,
    scorer: &S,
    trunc: usize,
    seed: u64,
) -> Result<SelectionTrace> {
    let first = experiments.first().ok_or_else(|| NetinfError::usage("at least one experiment is required"))?;
    let full = ModelStructure::full(target, first.observed(), first.inputs());
    let problem = assemble(experiments, &full, trunc)?;
    let full_fit = scorer.fit(&problem, seed, None)?;

    let offset = usize::from(full.include_own);
    let confidences: Vec<f64> = full.groups.iter().enumerate().map(|(k, _)| full_fit.block_norms[offset + k]).collect();
    let order = removal_order(&full.groups, &confidences);

    let mut steps = vec![SelectionStep { structure: full.clone(), lower_bound: full_fit.score, removed_group: None, error: None }];
    let mut fits = vec![Some(full_fit)];
    let mut removed = Vec::with_capacity(order.len());
    let mut parent = 0;
    for &k in &order {
        let group = full.groups[k];
        removed.push(group);
        let structure = full.without(&removed);
        let outcome = assemble(experiments, &structure, trunc).and_then(|p| scorer.fit(&p, seed, fits[parent].as_ref()));
        match outcome {
            Ok(fit) => {
                steps.push(SelectionStep { structure, lower_bound: fit.score, removed_group: Some(group), error: None });
                fits.push(Some(fit));
                parent = fits.len() - 1;
            }
            Err(e) => {
                warn!("target y{}: candidate without {} failed: {e}", target + 1, group);
                steps.push(SelectionStep {
                    structure,
                    lower_bound: f64::NEG_INFINITY,
                    removed_group: Some(group),
                    error: Some(e.to_string()),
                });
                fits.push(None);
            }
        }
    }
    let scores: Vec<f64> = steps.iter().map(|s| s.lower_bound).collect();
    let chosen = argmax_prefer_sparse(&scores).expect("trace is never empty");
    let fit = fits[chosen]
        .take()
        .ok_or_else(|| NetinfError::numerical("backward selection", format!("every candidate for y{} failed", target + 1)))?;
    Ok(SelectionTrace {
        target,
        confidences: order.iter().map(|&k| (full.groups[k], confidences[k])).collect(),
        steps,
        chosen,
        w_mean: mean_w(&fit.w_hat),
        chosen_norms: fit.block_norms,
        pruned: fit.pruned,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub trunc: usize,
    pub seed: u64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self { trunc: DEFAULT_TRUNCATION, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferredLink {
    pub target: usize,
    pub source: GroupId,
    pub confidence: f64,
    /// Mean impulse response over experiments.
    pub w_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub target: usize,
    pub trace: Option<SelectionTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferredNetwork {
    pub method: Method,
    pub trunc: usize,
    /// `q_adj[i][j]`: `y_j` drives `y_i`; `p_adj[i][k]`: `u_k` drives `y_i`.
    pub structure: DsfStructure,
    pub links: Vec<InferredLink>,
    pub nodes: Vec<NodeReport>,
}

impl InferredNetwork {
    pub fn unresolved(&self) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.trace.is_none()).map(|n| n.target).collect()
    }
}

/// Runs backward selection for every observed node (in parallel) and
/// assembles the union of the chosen structures.
pub fn infer_network<S: StructureScorer + ?Sized>(
    experiments: &[Experiment],
    scorer: &S,
    cfg: &TopologyConfig,
) -> Result<InferredNetwork> {
    let first = experiments.first().ok_or_else(|| NetinfError::usage("at least one experiment is required"))?;
    let (p, m) = (first.observed(), first.inputs());
    if let Some(bad) = experiments.iter().find(|e| e.observed() != p || e.inputs() != m) {
        return Err(NetinfError::usage(format!(
            "experiments disagree on dimensions: {p} nodes/{m} inputs vs {}/{}",
            bad.observed(),
            bad.inputs()
        )));
    }
    let nodes: Vec<NodeReport> = (0..p)
        .into_par_iter()
        .map(|target| match backward_select(experiments, target, scorer, cfg.trunc, derive_seed(cfg.seed, target as u64)) {
            Ok(trace) => NodeReport { target, trace: Some(trace), error: None },
            Err(e) => {
                warn!("target y{} unresolved: {e}", target + 1);
                NodeReport { target, trace: None, error: Some(e.to_string()) }
            }
        })
        .collect();

    let mut q_adj = vec![vec![false; p]; p];
    let mut p_adj = vec![vec![false; m]; p];
    let mut links = Vec::new();
    for node in &nodes {
        let Some(trace) = &node.trace else { continue };
        let chosen = trace.chosen_structure();
        let blocks = chosen.blocks();
        for (k, block) in blocks.iter().enumerate() {
            let Block::Link(group) = *block else { continue };
            if trace.pruned.contains(&group) {
                continue;
            }
            match group {
                GroupId::Node(j) => q_adj[node.target][j] = true,
                GroupId::Input(j) => p_adj[node.target][j] = true,
            }
            let range = k * cfg.trunc..(k + 1) * cfg.trunc;
            links.push(InferredLink {
                target: node.target,
                source: group,
                confidence: trace.chosen_norms[k],
                w_hat: trace.w_mean[range].to_vec(),
            });
        }
    }
    Ok(InferredNetwork {
        method: scorer.method(),
        trunc: cfg.trunc,
        structure: DsfStructure::new(q_adj, p_adj)?,
        links,
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Replays fixed norms for the full model and a fixed score per link count.
    struct Scripted {
        norms: Vec<f64>,
        scores: Vec<f64>,
    }

    impl StructureScorer for Scripted {
        fn method(&self) -> Method {
            Method::Vi
        }

        fn fit(&self, problem: &RegressionProblem, _seed: u64, _parent: Option<&ScoredFit>) -> Result<ScoredFit> {
            let links = problem.structure.link_count();
            let norms = if links + 1 == self.norms.len() { self.norms.clone() } else { vec![1.0; problem.block_count()] };
            Ok(ScoredFit {
                score: self.scores[links],
                block_norms: norms,
                w_hat: vec![DVector::zeros(problem.columns())],
                factors: Vec::new(),
                pruned: Vec::new(),
            })
        }
    }

    fn experiment(p: usize, m: usize) -> Experiment {
        let y = nalgebra::DMatrix::from_fn(p, 30, |i, t| ((i * 7 + t * 3) % 5) as f64);
        let u = nalgebra::DMatrix::from_fn(m, 30, |i, t| ((i + t) % 3) as f64);
        Experiment::new(y, u, crate::netsim::NoiseSetting::NoNoise).unwrap()
    }

    #[test]
    fn removal_follows_ascending_confidence() {
        // groups y2, y3, y4 of target y1 with confidences 0.1, 5, 3
        let scorer = Scripted { norms: vec![9.0, 0.1, 5.0, 3.0], scores: vec![-10.0, -5.0, -1.0, -2.0] };
        let trace = backward_select(&[experiment(4, 0)], 0, &scorer, 5, 0).unwrap();
        let removed: Vec<_> = trace.steps.iter().map(|s| s.removed_group).collect();
        assert_eq!(removed, vec![None, Some(GroupId::Node(1)), Some(GroupId::Node(3)), Some(GroupId::Node(2))]);
        assert_eq!(trace.steps[2].structure.groups, vec![GroupId::Node(2)]);
        assert!(trace.steps.last().unwrap().structure.groups.is_empty());
        assert!(trace.steps.iter().all(|s| s.structure.include_own));
        // scores by link count: 2 links -> -1 is best
        assert_eq!(trace.chosen, 1);
    }

    #[test]
    fn ties_go_to_the_sparser_structure() {
        assert_eq!(argmax_prefer_sparse(&[1.0, 3.0, 3.0 * (1.0 - 1e-12), 2.0]), Some(2));
        assert_eq!(argmax_prefer_sparse(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), Some(1));
        assert_eq!(argmax_prefer_sparse(&[f64::NEG_INFINITY, -4.0]), Some(1));
        assert_eq!(argmax_prefer_sparse(&[]), None);
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        let groups = [GroupId::Node(1), GroupId::Node(2), GroupId::Input(0)];
        assert_eq!(removal_order(&groups, &[2.0, 1.0, 1.0]), vec![1, 2, 0]);
    }

    #[test]
    fn trace_serialises_failed_scores_as_null() {
        let step = SelectionStep {
            structure: ModelStructure::full(0, 2, 0),
            lower_bound: f64::NEG_INFINITY,
            removed_group: None,
            error: Some("boom".into()),
        };
        let json = serde_json::to_string(&step).unwrap();
        assert!(json.contains("\"lower_bound\":null"));
        let back: SelectionStep = serde_json::from_str(&json).unwrap();
        assert_eq!(back, step);
    }

    #[test]
    fn method_tags() {
        assert_eq!(serde_json::to_string(&Method::KebTc).unwrap(), "\"keb-tc\"");
        assert_eq!("keb".parse::<Method>().unwrap(), Method::KebTc);
        assert!("lasso".parse::<Method>().is_err());
    }
}
