use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use proxlearn::prox::{self, Kernel, ProxInputs};
use proxlearn::trainer::prox_learn_step;
use proxlearn_bench::sinusoid_fixture;

fn bench_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("prox_learn_step");
    group.sample_size(10);
    for n in [250, 1000] {
        let mut f = sinusoid_fixture(n, 100, 1e-3);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| prox_learn_step(&f.cloud, f.x.view(), &f.labels, &f.spec, &f.step, &mut f.rng).unwrap())
        });
    }
    group.finish();
}

fn bench_kernel(c: &mut Criterion) {
    let mut group = c.benchmark_group("gibbs_kernel");
    group.sample_size(10);
    for eps in [1e-3, 1.0] {
        let f = sinusoid_fixture(1000, 10, eps);
        let shifted = &f.cloud.theta + 0.01;
        group.bench_with_input(BenchmarkId::from_parameter(eps), &eps, |b, &eps| {
            b.iter(|| Kernel::gibbs(shifted.view(), f.cloud.theta.view(), eps).unwrap())
        });
    }
    group.finish();
}

fn bench_sinkhorn(c: &mut Criterion) {
    let mut group = c.benchmark_group("sinkhorn_fixed_point");
    group.sample_size(10);
    for eps in [1e-3, 1.0] {
        let mut f = sinusoid_fixture(1000, 10, eps);
        let shifted = &f.cloud.theta + 0.01;
        let gamma = Kernel::gibbs(shifted.view(), f.cloud.theta.view(), eps).unwrap();
        let n = f.cloud.len();
        let log_xi = ndarray::Array1::from_iter((0..n).map(|i| -1.0 - 0.01 * i as f64 / n as f64));
        let alpha = prox::contraction_exponent(0.3, eps, 1e-4).unwrap();
        let inputs = ProxInputs::from_log_xi(gamma, log_xi, f.cloud.rho.clone(), alpha).unwrap();
        let z0 = prox::random_z0(n, &mut f.rng);
        group.bench_with_input(BenchmarkId::from_parameter(eps), &eps, |b, _| {
            b.iter(|| prox::sinkhorn_fixed_point(&inputs, 1e-3, 300, &z0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_step, bench_kernel, bench_sinkhorn);
criterion_main!(benches);
