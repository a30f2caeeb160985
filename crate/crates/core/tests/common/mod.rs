//! Fixtures and oracles shared by integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use netinf::keb::em_gamma_step;
use netinf::kernel::TcDecomposition;
use netinf::netsim::{simulate, spectral_radius, Experiment, NoiseSetting, StateSpaceModel};
use netinf::problem::{assemble, ExperimentData, GroupId, ModelStructure, RegressionProblem};
use netinf::topology::StructureScorer;
use netinf::vi::{update_lambda, update_w_sigma, ViConfig, ViState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Fully observed 2- or 3-node network, one input per node, stable `A`.
pub fn small_network(seed: u64) -> StateSpaceModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = if rng.random::<bool>() { 2 } else { 3 };
    loop {
        let a = DMatrix::from_fn(p, p, |i, j| {
            if i == j {
                rng.random_range(0.1..0.5)
            } else if rng.random::<f64>() < 0.4 {
                let mag = rng.random_range(0.4..0.9);
                if rng.random::<bool>() { mag } else { -mag }
            } else {
                0.0
            }
        });
        if spectral_radius(&a) < 0.95 {
            return StateSpaceModel::new(a, DMatrix::identity(p, p), DMatrix::identity(p, p), p).unwrap();
        }
    }
}

pub fn small_fixture(seed: u64, points: usize) -> (StateSpaceModel, Experiment) {
    let model = small_network(seed);
    let exp = simulate(&model, points, NoiseSetting::NoNoise, seed.wrapping_add(1000));
    (model, exp)
}

/// Best structure over every subset of candidate groups, own block always in.
/// Near-ties (1e-9 relative) go to the subset with fewer links.
pub fn exhaustive_best<S: StructureScorer>(
    experiments: &[Experiment],
    target: usize,
    scorer: &S,
    trunc: usize,
    seed: u64,
) -> (ModelStructure, f64) {
    let full = ModelStructure::full(target, experiments[0].observed(), experiments[0].inputs());
    let c = full.groups.len();
    let mut scored: Vec<(usize, ModelStructure, f64)> = Vec::new();
    for mask in 0u32..(1 << c) {
        let groups: Vec<GroupId> = (0..c).filter(|k| mask & (1 << k) != 0).map(|k| full.groups[k]).collect();
        let s = ModelStructure::new(target, true, groups).unwrap();
        let score = assemble(experiments, &s, trunc)
            .and_then(|p| scorer.fit(&p, seed, None))
            .map(|f| f.score)
            .unwrap_or(f64::NEG_INFINITY);
        scored.push((s.link_count(), s, score));
    }
    let best = scored.iter().map(|x| x.2).fold(f64::NEG_INFINITY, f64::max);
    let floor = best - 1e-9 * best.abs();
    let (_, s, score) = scored
        .into_iter()
        .filter(|x| x.2 >= floor)
        .min_by_key(|x| x.0)
        .unwrap();
    (s, score)
}

/// True link groups into `target` read straight off `A` (fully observed).
pub fn true_groups(model: &StateSpaceModel, target: usize) -> Vec<GroupId> {
    let p = model.observed;
    let mut g: Vec<GroupId> = (0..p).filter(|&j| j != target && model.a[(target, j)] != 0.0).map(GroupId::Node).collect();
    g.extend((0..model.inputs).filter(|&k| model.b_u[(target, k)] != 0.0).map(GroupId::Input));
    g
}

fn regression(structure: ModelStructure, trunc: usize, experiments: Vec<ExperimentData>) -> RegressionProblem {
    RegressionProblem { blocks: structure.blocks(), structure, trunc, experiments }
}

fn scaled(p: &RegressionProblem, phi_scale: f64, y_scale: f64) -> RegressionProblem {
    let experiments =
        p.experiments.iter().map(|e| ExperimentData { y: &e.y * y_scale, phi: &e.phi * phi_scale }).collect();
    RegressionProblem { experiments, ..p.clone() }
}

/// Largest relative gap per case between the EM scale update on the rescaled
/// problem (`sigma = E[s]^-1/2`, `Phi E[s]^-1/4`, `Y E[s]^1/4`,
/// `Gamma = E[lambda]^-1`, `K = E[K^-1]^-1`) and `1 / E[lambda]` after one
/// variational sweep, in the vanishing-hyperprior limit.
pub fn em_vs_variational_gaps(cases: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tiny = 1e-300;
    let cfg = ViConfig { a0: tiny, b0: tiny, ..Default::default() };
    let mut gaps = Vec::with_capacity(cases);
    for case in 0..cases {
        let t = rng.random_range(1..=6);
        let groups = rng.random_range(1..=3);
        let n_exp = rng.random_range(1..=2);
        // alternate between the information and Woodbury forms
        let rows = if case % 2 == 0 { groups * t + rng.random_range(1..10) } else { rng.random_range(2..(groups * t).max(3)) };
        let structure = ModelStructure::new(0, true, (1..groups).map(GroupId::Node).collect()).unwrap();
        let experiments = (0..n_exp)
            .map(|_| ExperimentData {
                y: DVector::from_fn(rows, |_, _| rng.sample(StandardNormal)),
                phi: DMatrix::from_fn(rows, groups * t, |_, _| rng.sample(StandardNormal)),
            })
            .collect();
        let prob = regression(structure, t, experiments);

        let mut state = ViState::initial(&prob, &cfg).unwrap();
        let mut kinv = Vec::new();
        for g in state.groups.iter_mut() {
            g.a_lambda = rng.random_range(0.5..5.0);
            g.b_lambda = rng.random_range(0.5..5.0);
            g.mean_inverse = TcDecomposition::from_weights((0..t).map(|_| rng.random_range(0.2..20.0)).collect()).unwrap();
            kinv.push(g.mean_inverse.clone());
        }
        let gamma: Vec<f64> = state.groups.iter().map(|g| 1.0 / g.e_lambda()).collect();

        update_w_sigma(&prob, &mut state, &cfg).unwrap();
        let s = state.e_sigma();
        update_lambda(&prob, &mut state, &cfg);

        let hat = scaled(&prob, s.powf(-0.25), s.powf(0.25));
        let em = em_gamma_step(&hat, &gamma, &kinv, s.powf(-0.5)).unwrap();
        let gap = state
            .groups
            .iter()
            .zip(&em)
            .map(|(g, e)| {
                let vi = g.b_lambda / g.a_lambda;
                (vi - e).abs() / vi.abs()
            })
            .fold(0.0, f64::max);
        gaps.push(gap);
    }
    gaps
}
