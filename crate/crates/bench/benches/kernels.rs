use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use phiflow_bench::Fixture;
use phiflow_core::potential::apply_a;
use phiflow_core::sde::Stepper;
use phiflow_core::{NoiseOperator, NoiseRule, NonlinearitySpec, ProxSolveSettings, ProxSolver, SdeConfig};

fn specs() -> [NonlinearitySpec; 2] {
    [NonlinearitySpec::arctan(), NonlinearitySpec::p_laplace(1.5).expect("p in range")]
}

fn prox(c: &mut Criterion) {
    let mut group = c.benchmark_group("prox_solve");
    for (d, n) in [(1, 64), (1, 256), (2, 32)] {
        let fx = Fixture::new(d, n, 1);
        for spec in specs() {
            let mut solver = ProxSolver::new(&spec, &fx.grid, ProxSolveSettings::default()).expect("valid settings");
            group.bench_with_input(BenchmarkId::new(spec.id.clone(), format!("d{d}n{n}")), &fx.field, |b, g| {
                b.iter(|| solver.solve(black_box(g), 1e-3).expect("converges"))
            });
        }
    }
    group.finish();
}

fn operator(c: &mut Criterion) {
    let fx = Fixture::new(2, 64, 2);
    let spec = NonlinearitySpec::arctan();
    c.bench_function("apply_a/d2n64", |b| b.iter(|| apply_a(&spec, black_box(&fx.field))));
}

fn spectral(c: &mut Criterion) {
    let mut group = c.benchmark_group("spectral");
    for (d, n) in [(1, 256), (2, 64)] {
        let fx = Fixture::new(d, n, 3);
        let coeffs = fx.basis.forward(&fx.field).expect("own grid");
        group.bench_function(format!("forward/d{d}n{n}"), |b| b.iter(|| fx.basis.forward(black_box(&fx.field))));
        group.bench_function(format!("inverse/d{d}n{n}"), |b| b.iter(|| fx.basis.inverse(black_box(&coeffs))));
    }
    group.finish();
}

fn sde_step(c: &mut Criterion) {
    let fx = Fixture::new(1, 64, 4);
    let noise = NoiseOperator::from_rule(fx.basis.clone(), &NoiseRule::Poly { q: 2.0, scale: 1.0 }, 64).expect("valid rule");
    let cfg = SdeConfig::new(1e-3, 1.0, 5);
    for spec in specs() {
        let mut st = Stepper::new(&spec, &noise, &cfg).expect("valid config");
        let mut u = fx.field.values().to_vec();
        let mut k = 0u64;
        c.bench_function(&format!("sde_step/{}/d1n64", spec.id), |b| {
            b.iter(|| {
                st.step(&mut u, k).expect("step converges");
                k += 1;
            })
        });
    }
}

criterion_group!(benches, prox, operator, spectral, sde_step);
criterion_main!(benches);
