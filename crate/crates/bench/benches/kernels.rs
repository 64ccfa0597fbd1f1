use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use kinetic_core::collision::{CollisionKernel, GaussianProfile};
use kinetic_core::poisson::{sample_cells, solve_neumann_poisson, PoissonConfig, PoissonMesh};
use kinetic_core::{LevelSetDomain, PhaseState, RadialField, Tracer, Vec3};

fn characteristics(c: &mut Criterion) {
    let domain = LevelSetDomain::ball(Vec3::zeros(), 1.0);
    let field = RadialField { strength: 1.0 };
    let tracer = Tracer::new(&domain, &field);
    let st = PhaseState::new(2.0, Vec3::new(0.1, 0.2, -0.1), Vec3::new(0.7, -0.4, 0.3));
    c.bench_function("backward_exit", |b| b.iter(|| tracer.backward_exit(black_box(&st)).unwrap()));
    c.bench_function("flow_jacobian", |b| b.iter(|| tracer.flow_jacobian(black_box(&st), 1.8).unwrap()));
}

fn collision(c: &mut Criterion) {
    let kernel = CollisionKernel::default();
    let f = GaussianProfile::shifted(Vec3::new(0.3, 0.0, -0.1));
    let mu = GaussianProfile::maxwellian();
    let v = Vec3::new(0.5, -0.2, 0.1);
    c.bench_function("q_operator", |b| b.iter(|| kernel.q_operator(&f, &mu, black_box(&v)).unwrap()));
}

fn poisson(c: &mut Criterion) {
    let cfg = PoissonConfig::default();
    let domain = LevelSetDomain::ball(Vec3::zeros(), 1.0);
    let mesh = std::sync::Arc::new(PoissonMesh::new(&domain, &cfg).unwrap());
    let mut src = sample_cells(&mesh, |x| x[0] * x[1] + x[2]);
    let mean = mesh.system.mean(&src);
    src.iter_mut().for_each(|s| *s -= mean);
    let mut g = c.benchmark_group("poisson");
    g.sample_size(10);
    g.bench_function("neumann_solve", |b| b.iter(|| solve_neumann_poisson(&mesh, black_box(&src), &cfg).unwrap()));
    g.finish();
}

criterion_group!(benches, characteristics, collision, poisson);
criterion_main!(benches);
