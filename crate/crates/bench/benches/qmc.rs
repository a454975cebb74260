use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use spinbath::kernel::KernelTable;
use spinbath::model::DEFAULT_TOL;
use spinbath::qmc::{ChainState, InitialState};
use spinbath::worldline::log_weight;
use spinbath::SamplerSchedule;
use spinbath_bench::{action, chain};
use std::hint::black_box;

fn sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("sweep");
    for (length, beta) in [(10, 10.0), (10, 100.0), (40, 100.0)] {
        let (p, lat) = chain(length, beta);
        let act = action(&p, &lat);
        let schedule = SamplerSchedule::default();
        let mut state = ChainState::new(&lat, InitialState::AllUp, 7, 0);
        for _ in 0..200 {
            state.sweep(&act, &schedule);
        }
        group.bench_function(BenchmarkId::from_parameter(format!("L{length}_beta{beta}")), |b| {
            b.iter(|| state.sweep(&act, &schedule))
        });
    }
    group.finish();
}

fn kernel_table(c: &mut Criterion) {
    let mut group = c.benchmark_group("kernel_table");
    group.sample_size(10);
    for beta in [10.0, 100.0] {
        let (p, lat) = chain(10, beta);
        group.bench_function(BenchmarkId::from_parameter(format!("beta{beta}")), |b| {
            b.iter(|| KernelTable::build(black_box(&lat), &p, DEFAULT_TOL).unwrap())
        });
    }
    group.finish();
}

fn full_weight(c: &mut Criterion) {
    let (p, lat) = chain(10, 10.0);
    let act = action(&p, &lat);
    let mut state = ChainState::new(&lat, InitialState::AllUp, 3, 0);
    for _ in 0..500 {
        state.sweep(&act, &SamplerSchedule::default());
    }
    c.bench_function("log_weight/L10_beta10", |b| b.iter(|| log_weight(black_box(&state.config), &act)));
}

criterion_group!(benches, sweep, kernel_table, full_weight);
criterion_main!(benches);
