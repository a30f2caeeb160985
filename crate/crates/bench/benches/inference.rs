use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use netinf::keb::{run_keb, KebConfig};
use netinf::kernel::{mean_inverse_decomposition, tc_inverse_decomposition, TcKernelParam};
use netinf::vi::{run_vi, BetaExpectation, ViConfig};
use netinf_bench::full_problem;
use std::hint::black_box;

fn kernel(c: &mut Criterion) {
    let mut g = c.benchmark_group("tc_decomposition");
    for t in [10, 20, 50] {
        let beta = TcKernelParam::new(0.8).unwrap();
        g.bench_with_input(BenchmarkId::new("single", t), &t, |b, &t| b.iter(|| tc_inverse_decomposition(black_box(t), beta)));
    }
    let samples: Vec<TcKernelParam> = (0..500).map(|k| TcKernelParam::new(0.3 + 0.6 * k as f64 / 500.0).unwrap()).collect();
    g.bench_function("mean_of_500", |b| b.iter(|| mean_inverse_decomposition(20, black_box(&samples))));
    g.finish();
}

fn vi(c: &mut Criterion) {
    let mut g = c.benchmark_group("vi");
    g.sample_size(10);
    for points in [85, 300] {
        let problem = full_problem(points, 20, 1);
        let one = ViConfig { max_iter: 1, ..Default::default() };
        g.bench_with_input(BenchmarkId::new("one_iteration_mh", points), &problem, |b, p| b.iter(|| run_vi(p, &one)));
        let quad = ViConfig { beta_expectation: BetaExpectation::Quadrature, ..one };
        g.bench_with_input(BenchmarkId::new("one_iteration_quadrature", points), &problem, |b, p| b.iter(|| run_vi(p, &quad)));
    }
    let problem = full_problem(85, 20, 1);
    g.bench_function("full_fit_85", |b| b.iter(|| run_vi(&problem, &ViConfig::default())));
    g.finish();
}

fn keb(c: &mut Criterion) {
    let mut g = c.benchmark_group("keb");
    g.sample_size(10);
    let problem = full_problem(200, 20, 1);
    let one = KebConfig { max_iter: 1, ..Default::default() };
    g.bench_function("one_iteration_200", |b| b.iter(|| run_keb(&problem, &one)));
    g.finish();
}

criterion_group!(benches, kernel, vi, keb);
criterion_main!(benches);
