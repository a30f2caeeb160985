//! Per-target regression data for the truncated non-parametric predictor.
//!
//! For target node `i` and truncation `T`, each experiment contributes
//! `Y = [y_i(N-1), ..., y_i(T)]'` (descending time) and a regressor matrix
//! whose column blocks hold lags `1..=T` of one predictor series each.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{NetinfError, Result};
use crate::netsim::Experiment;

/// Default impulse-response truncation length.
pub const DEFAULT_TRUNCATION: usize = 20;

/// A predictor group that may carry a network link into the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "lowercase")]
pub enum GroupId {
    Node(usize),
    Input(usize),
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupId::Node(j) => write!(f, "y{}", j + 1),
            GroupId::Input(j) => write!(f, "u{}", j + 1),
        }
    }
}

/// Column block label: the target's own lags or a link group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    /// Own lags of the target, which carry the noise-model dynamics.
    Own,
    Link(GroupId),
}

/// Candidate structure for one target node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStructure {
    pub target: usize,
    pub include_own: bool,
    pub groups: Vec<GroupId>,
}

impl ModelStructure {
    pub fn new(target: usize, include_own: bool, groups: Vec<GroupId>) -> Result<Self> {
        if groups.contains(&GroupId::Node(target)) {
            return Err(NetinfError::usage(format!("target y{} cannot be its own link group", target + 1)));
        }
        let mut sorted = groups.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(NetinfError::usage("duplicate predictor group"));
        }
        Ok(Self { target, include_own, groups })
    }

    /// Every other observed node and every input, plus the own-lag block.
    pub fn full(target: usize, observed: usize, inputs: usize) -> Self {
        let groups = (0..observed)
            .filter(|&j| j != target)
            .map(GroupId::Node)
            .chain((0..inputs).map(GroupId::Input))
            .collect();
        Self { target, include_own: true, groups }
    }

    /// Number of link groups (the own block is not counted).
    pub fn link_count(&self) -> usize {
        self.groups.len()
    }

    /// Column blocks in regressor order: own lags first, then `groups`.
    pub fn blocks(&self) -> Vec<Block> {
        self.include_own
            .then_some(Block::Own)
            .into_iter()
            .chain(self.groups.iter().map(|g| Block::Link(*g)))
            .collect()
    }

    pub fn without(&self, removed: &[GroupId]) -> Self {
        Self {
            target: self.target,
            include_own: self.include_own,
            groups: self.groups.iter().filter(|g| !removed.contains(g)).copied().collect(),
        }
    }
}

/// Stacked data of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub y: DVector<f64>,
    pub phi: DMatrix<f64>,
}

impl ExperimentData {
    pub fn rows(&self) -> usize {
        self.y.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionProblem {
    pub structure: ModelStructure,
    pub blocks: Vec<Block>,
    pub trunc: usize,
    pub experiments: Vec<ExperimentData>,
}

impl RegressionProblem {
    /// Number of column blocks, own block included.
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn columns(&self) -> usize {
        self.trunc * self.blocks.len()
    }

    pub fn block_range(&self, k: usize) -> std::ops::Range<usize> {
        k * self.trunc..(k + 1) * self.trunc
    }

    pub fn block_of(&self, block: Block) -> Option<usize> {
        self.blocks.iter().position(|b| *b == block)
    }

    pub fn total_rows(&self) -> usize {
        self.experiments.iter().map(ExperimentData::rows).sum()
    }
}

/// Assembles the stacked regression for `structure` from every experiment.
pub fn assemble(experiments: &[Experiment], structure: &ModelStructure, trunc: usize) -> Result<RegressionProblem> {
    if trunc == 0 {
        return Err(NetinfError::param("trunc", "truncation length must be at least 1"));
    }
    if experiments.is_empty() {
        return Err(NetinfError::usage("at least one experiment is required"));
    }
    let blocks = structure.blocks();
    let mut data = Vec::with_capacity(experiments.len());
    for exp in experiments {
        let n = exp.n_points();
        if n <= trunc {
            return Err(NetinfError::InsufficientData { points: n, trunc });
        }
        if structure.target >= exp.observed() {
            return Err(NetinfError::usage(format!("target y{} is not observed", structure.target + 1)));
        }
        let rows = n - trunc;
        let target = exp.y.row(structure.target);
        let y = DVector::from_fn(rows, |r, _| target[n - 1 - r]);
        let mut phi = DMatrix::zeros(rows, trunc * blocks.len());
        for (k, block) in blocks.iter().enumerate() {
            let (mat, idx) = source(exp, *block, structure.target)?;
            for r in 0..rows {
                let t = n - 1 - r;
                for lag in 1..=trunc {
                    phi[(r, k * trunc + lag - 1)] = mat[(idx, t - lag)];
                }
            }
        }
        data.push(ExperimentData { y, phi });
    }
    Ok(RegressionProblem { structure: structure.clone(), blocks, trunc, experiments: data })
}

fn source(exp: &Experiment, block: Block, target: usize) -> Result<(&DMatrix<f64>, usize)> {
    let (mat, row, label) = match block {
        Block::Own => (&exp.y, target, "node"),
        Block::Link(GroupId::Node(j)) => (&exp.y, j, "node"),
        Block::Link(GroupId::Input(j)) => (&exp.u, j, "input"),
    };
    if row >= mat.nrows() {
        return Err(NetinfError::usage(format!("{label} index {} out of range ({} available)", row + 1, mat.nrows())));
    }
    Ok((mat, row))
}

/// One-step-ahead prediction `Phi_q w` for every experiment.
pub fn predict_one_step(problem: &RegressionProblem, w_hat: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
    if w_hat.len() != problem.columns() {
        return Err(NetinfError::usage(format!(
            "impulse-response vector has length {} but the problem has {} columns",
            w_hat.len(),
            problem.columns()
        )));
    }
    Ok(problem.experiments.iter().map(|e| &e.phi * w_hat).collect())
}
