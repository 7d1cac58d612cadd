use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use wxrestore::attention::{channel_attention, linear_attention, spatial_attention};
use wxrestore::grouping::partition;
use wxrestore::spectral::{default_rank, sobel_magnitude, svd_lowrank, to_grayscale};
use wxrestore::{Graph, Tensor};
use wxrestore_bench::{image, tokens};

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    for n in [256usize, 1024] {
        let (q, k, v) = (tokens(n, 32, 0.0), tokens(n, 32, 1.0), tokens(n, 32, 2.0));
        group.bench_with_input(BenchmarkId::new("linear", n), &n, |b, _| {
            b.iter(|| {
                let mut g = Graph::<f32>::new();
                let (q, k, v) = (g.variable(q.clone()), g.variable(k.clone()), g.variable(v.clone()));
                let o = linear_attention(&mut g, q, k, v, 2).unwrap();
                black_box(g.backward(o));
            })
        });
        group.bench_with_input(BenchmarkId::new("channel", n), &n, |b, _| {
            b.iter(|| {
                let mut g = Graph::<f32>::new();
                let (q, k, v) = (g.variable(q.clone()), g.variable(k.clone()), g.variable(v.clone()));
                let t = g.variable(Tensor::full(&[2], 1.0));
                let o = channel_attention(&mut g, q, k, v, 2, t).unwrap();
                black_box(g.backward(o));
            })
        });
        group.bench_with_input(BenchmarkId::new("spatial", n), &n, |b, _| {
            b.iter(|| {
                let mut g = Graph::<f32>::new();
                let (q, k, v) = (g.variable(q.clone()), g.variable(k.clone()), g.variable(v.clone()));
                let t = g.variable(Tensor::full(&[2], 1.0));
                let o = spatial_attention(&mut g, q, k, v, 2, t, 4096).unwrap();
                black_box(g.backward(o));
            })
        });
    }
    group.finish();
}

fn spectral(c: &mut Criterion) {
    let mut group = c.benchmark_group("spectral");
    for s in [32usize, 64] {
        let gray = to_grayscale(&image(s, s)).unwrap();
        group.bench_with_input(BenchmarkId::new("sobel", s), &s, |b, _| b.iter(|| black_box(sobel_magnitude(&gray).unwrap())));
        let plane = gray.clone().into_plane();
        let rank = default_rank(s, s);
        group.bench_with_input(BenchmarkId::new("svd_lowrank", s), &s, |b, _| {
            b.iter(|| black_box(svd_lowrank(&plane, rank).unwrap()))
        });
    }
    group.finish();
}

fn grouping(c: &mut Criterion) {
    let mask: Vec<f32> = (0..4096).map(|i| ((i as f32) * 0.37).sin()).collect();
    c.bench_function("partition_4096_into_4", |b| b.iter(|| black_box(partition(&mask, 4).unwrap())));
}

criterion_group!(benches, attention, spectral, grouping);
criterion_main!(benches);
