//! Parallel versus sequential execution of the main kernels.
//!
//! `cargo bench --bench solvers`; add `--no-default-features` to build
//! without rayon, in which case both variants run sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use netsem::eval::cross_validate_lambda;
use netsem::kernel::{build_kernel_set, KernelSpec, Ridge};
use netsem::model::{Dataset, SolverConfig, SolverKind};
use netsem::par::Execution;
use netsem::solve::Method;
use netsem::synth::{generate_dataset, Generator, SynthConfig};

const MODES: [(&str, Execution); 2] = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

fn dataset(samples: usize) -> Dataset {
    let cfg = SynthConfig {
        kron_power: 2,
        samples,
        generator: Generator::Kernel {
            kernel: KernelSpec::Gaussian { bandwidth: 0.01 },
        },
        rng_seed: 3,
        ..Default::default()
    };
    generate_dataset(&cfg).unwrap().0
}

fn kernel_set(c: &mut Criterion) {
    let ds = dataset(128);
    let spec = KernelSpec::Gaussian { bandwidth: 0.01 };
    let mut g = c.benchmark_group("kernel_set_n16_m128");
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| build_kernel_set(&spec, black_box(ds.y()), Ridge::default(), exec).unwrap())
        });
    }
    g.finish();
}

fn solvers(c: &mut Criterion) {
    let ds = dataset(64);
    let spec = KernelSpec::Gaussian { bandwidth: 0.01 };
    let mut g = c.benchmark_group("solve_n16_m64");
    g.sample_size(10);
    for kind in [SolverKind::Admm, SolverKind::Pg, SolverKind::Apg] {
        let method = Method::kernel(kind, spec);
        for (name, exec) in MODES {
            let cfg = SolverConfig {
                lambda: 0.05,
                max_iters: 200,
                execution: exec,
                ..Default::default()
            };
            let prepared = method.prepare(&ds, &cfg).unwrap();
            g.bench_with_input(BenchmarkId::new(kind.name(), name), &cfg, |b, cfg| {
                b.iter(|| method.solve_prepared(&ds, &prepared, cfg, None).unwrap())
            });
        }
    }
    g.finish();
}

fn cross_validation(c: &mut Criterion) {
    let ds = dataset(64);
    let method = Method::kernel(SolverKind::Apg, KernelSpec::Gaussian { bandwidth: 0.01 });
    let grid = [0.01, 0.1, 1.0];
    let mut g = c.benchmark_group("cv_5fold_n16_m64");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = SolverConfig {
            max_iters: 100,
            execution: exec,
            ..Default::default()
        };
        g.bench_function(name, |b| {
            b.iter(|| cross_validate_lambda(&ds, &method, &grid, 5, &cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, kernel_set, solvers, cross_validation);
criterion_main!(benches);
