//! Shared fixtures for the criterion benches.

use netinf::eval::NetworkSpec;
use netinf::netsim::{simulate, NoiseSetting};
use netinf::problem::{assemble, ModelStructure, RegressionProblem};

/// Full-structure regression problem for node 0 of a 15-node/10-observed
/// random network, noiseless.
pub fn full_problem(points: usize, trunc: usize, seed: u64) -> RegressionProblem {
    let model = NetworkSpec::default().generate(seed).expect("benchmark network");
    let exp = simulate(&model, points, NoiseSetting::NoNoise, seed);
    let structure = ModelStructure::full(0, exp.observed(), exp.inputs());
    assemble(&[exp], &structure, trunc).expect("benchmark problem")
}
