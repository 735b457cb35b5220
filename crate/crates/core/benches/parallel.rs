//! Sequential against rayon execution of the data-parallel kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use convdl::dict::compute_sufficient_stats;
use convdl::grid::{make_grid, Partition};
use convdl::par::Execution;
use convdl::runtime::{prepare, RunOptions};
use convdl::tensor::{correlate_with, ConvOptions};
use convdl::workbench::{generate_synthetic, Preset};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn kernels(c: &mut Criterion) {
    let s = generate_synthetic(&Preset::TwoDTiny.spec(0)).unwrap();
    let grid = make_grid(s.x.domain(), 16, s.dictionary.support(), Partition::Grid).unwrap();

    let mut g = c.benchmark_group("correlate");
    for (name, exec) in MODES {
        let opts = ConvOptions { exec, ..ConvOptions::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| correlate_with(&s.x, &s.dictionary, opts).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("sufficient_stats");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| compute_sufficient_stats(&s.z, &s.x, &grid, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("prepare_workers");
    g.sample_size(20);
    for (name, exec) in MODES {
        let opts = RunOptions { exec, ..RunOptions::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| prepare(&s.x, &s.dictionary, 1.0, &grid, 1e-3, &opts, None).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
