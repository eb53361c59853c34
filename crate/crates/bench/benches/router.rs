use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ssr_core::router::{solve_joint, ExpandedBatch, RlsState};

fn batches(dim: usize, tasks: usize, rows: usize) -> Vec<ExpandedBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..tasks)
        .map(|t| {
            let h = DMatrix::from_fn(rows, dim, |_, _| StandardNormal.sample(&mut rng));
            ExpandedBatch::single_class(h, t, t + 1).unwrap()
        })
        .collect()
}

fn fold(dim: usize, chunk: usize, data: &[ExpandedBatch], direct: bool) -> RlsState {
    let mut s = RlsState::new(dim, 1.0).unwrap().with_chunk_size(chunk);
    for b in data {
        s.grow_label_space(1).unwrap();
        if direct {
            s.update_weight_direct(b).unwrap();
        } else {
            s.update(b).unwrap();
        }
    }
    s
}

fn router(c: &mut Criterion) {
    let mut g = c.benchmark_group("router_8_tasks_x_20_rows");
    for dim in [64, 256, 512] {
        let data = batches(dim, 8, 20);
        g.bench_with_input(BenchmarkId::new("solve_joint", dim), &dim, |b, &d| {
            b.iter(|| solve_joint(&data, d, 1.0).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("recursive", dim), &dim, |b, &d| {
            b.iter(|| fold(d, 64, &data, false))
        });
        g.bench_with_input(BenchmarkId::new("direct_weights", dim), &dim, |b, &d| {
            b.iter(|| fold(d, 64, &data, true))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("router_chunk_size");
    let data = batches(256, 2, 128);
    for chunk in [1, 8, 64, 128] {
        g.bench_with_input(BenchmarkId::from_parameter(chunk), &chunk, |b, &ch| {
            b.iter(|| fold(256, ch, &data, false))
        });
    }
    g.finish();
}

criterion_group!(benches, router);
criterion_main!(benches);
