use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lpvgain::lbopt;
use lpvgain::lpv;
use lpvgain::par::{self, Execution};
use lpvgain::pltv::NormOptions;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn frozen_grid(c: &mut Criterion) {
    let ex = lpv::example("twopar", None).unwrap();
    let grid = lpv::uniform_grid(&ex.model, &[12, 12]).unwrap();
    let mut group = c.benchmark_group("frozen_grid");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| lpv::frozen_lower_bound(&ex.model, &grid, exec).unwrap())
        });
    }
    group.finish();
}

// one complete poll: ν at a batch of decision vectors
fn nu_poll(c: &mut Criterion) {
    let ex = lpv::example("harald", None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let points: Vec<Vec<f64>> = (0..8)
        .map(|_| lpv::random_decision(&ex.model, &ex.schedule, &mut rng).unwrap())
        .collect();
    let opts = NormOptions::default();
    let mut group = c.benchmark_group("nu_poll");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                par::map(exec, &points, |x| {
                    lbopt::nu(&ex.model, &ex.schedule, x, 2.5, &opts).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, frozen_grid, nu_poll);
criterion_main!(benches);
