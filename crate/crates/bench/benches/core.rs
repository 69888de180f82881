use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use sbmcond::backbone::{grow_tree, TransformFields, TreeLaw};
use sbmcond::immigration::{cluster_params, laplace_semi_analytic, realize_y, shifted_solution};
use sbmcond::subsets::{ratio, v_from_u_unchecked};
use sbmcond::superprocess::simulate_sbm;
use sbmcond::{build_chain, stream, GrowOptions, ImmigrationPlan, NewtonOptions, PdeSolver, Point, Region, SbmParams, Shape, StepControl, SubsetFamily};
use std::hint::black_box;

fn solver(h: f64) -> PdeSolver {
    let chain = build_chain(Shape::unit_disk(), 3, 1.0, Point::ORIGIN).unwrap();
    PdeSolver::new(chain, h, NewtonOptions::default())
}

fn pde(c: &mut Criterion) {
    let mut group = c.benchmark_group("pde");
    for (name, h) in [("h=1/16", 1.0 / 16.0), ("h=1/32", 1.0 / 32.0)] {
        let s = solver(h);
        group.bench_function(format!("dirichlet f=1, {name}"), |b| b.iter(|| s.solve_dirichlet(Region::Full, &|_| 1.0).unwrap()));
    }
    let s = solver(1.0 / 32.0);
    let g = s.solve_dirichlet(Region::Full, &|_| 1.0).unwrap();
    group.bench_function("trace solve on D_2, h=1/32", |b| b.iter(|| s.solve_dirichlet_trace(Region::Sub(2), &g).unwrap()));
    group.finish();
}

fn particles(c: &mut Criterion) {
    let s = solver(1.0 / 32.0);
    let chain = s.chain().clone();
    let mut group = c.benchmark_group("particles");
    group.sample_size(20);
    for n in [16, 64] {
        let params = SbmParams::default().with_n(n);
        let mut i = 0u64;
        group.bench_function(format!("one replica to D_3, n={n}"), |b| {
            b.iter_batched(
                || {
                    i += 1;
                    stream(1, &[i])
                },
                |mut rng| simulate_sbm(&chain, Point::ORIGIN, &params, None, Region::Sub(3), &mut rng).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn backbone(c: &mut Criterion) {
    let s = solver(1.0 / 32.0);
    let chain = s.chain().clone();
    let g = s.solve_dirichlet(Region::Full, &|_| 1.0).unwrap();
    let fields = TransformFields::new(s.zero(Region::Full), g).unwrap();
    let law = TreeLaw::q(&fields);
    let mut group = c.benchmark_group("backbone");
    for dt in [1e-3, 2.5e-4] {
        let opts = GrowOptions {
            step: StepControl::default().with_dt(dt),
            ..GrowOptions::default()
        };
        let mut seed = 0u64;
        group.bench_function(format!("tree to D_2, dt={dt}"), |b| {
            b.iter(|| {
                seed += 1;
                grow_tree(&chain, &law, Point::ORIGIN, Region::Sub(2), &opts, seed).unwrap()
            })
        });
    }

    let region = Region::Sub(2);
    let kill = shifted_solution(&s, region, &|_| 0.0, &fields.g).unwrap();
    let w = shifted_solution(&s, region, &|_| 1.0, &fields.g).unwrap();
    let trees: Vec<_> = (0..64).map(|i| grow_tree(&chain, &law, Point::ORIGIN, region, &GrowOptions::default(), i).unwrap()).collect();
    group.bench_function("semi-analytic functional, 64 trees", |b| {
        b.iter(|| {
            trees
                .iter()
                .map(|t| laplace_semi_analytic(&ImmigrationPlan { tree: t, kill: &kill, level: 2 }, &w).unwrap())
                .sum::<f64>()
        })
    });
    let tree = &trees[0];
    let params = cluster_params(32, StepControl::default().with_dt(1e-3));
    let mut i = 0u64;
    group.sample_size(20);
    group.bench_function("one immigration realization, n=32", |b| {
        b.iter_batched(
            || {
                i += 1;
                stream(2, &[i])
            },
            |mut rng| realize_y(&s, &ImmigrationPlan { tree, kill: &kill, level: 2 }, &params, &mut rng),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn subsets(c: &mut Criterion) {
    let mut group = c.benchmark_group("subsets");
    for n in [4, 8] {
        let u = SubsetFamily::from_fn(n, |a| ratio(a.len() as i64 * 3 + 1, a.len() as i64 + 2)).unwrap();
        group.bench_function(format!("v from u, rational, n={n}"), |b| b.iter(|| v_from_u_unchecked(black_box(&u)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, pde, particles, backbone, subsets);
criterion_main!(benches);
