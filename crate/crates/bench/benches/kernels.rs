use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use deepclust::cae::{CaeModel, VggConfig};
use deepclust::Graph;
use deepclust_bench::{rng, uniform};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    for (cin, cout, side) in [(3, 32, 64), (32, 64, 32), (128, 256, 8)] {
        let mut r = rng(1);
        let x = uniform(&mut r, &[16, cin, side, side], 0.0, 1.0);
        let w = uniform(&mut r, &[cout, cin, 3, 3], -0.1, 0.1);
        let b = uniform(&mut r, &[cout], -0.1, 0.1);
        let id = format!("{cin}x{side}x{side}->{cout}");
        group.bench_with_input(BenchmarkId::new("forward", &id), &(), |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (xi, wi, bi) = (g.constant(x.clone()), g.input(w.clone()), g.input(b.clone()));
                g.conv2d(xi, wi, bi, 1, 1).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("forward+backward", &id), &(), |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (xi, wi, bi) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
                let y = g.conv2d(xi, wi, bi, 1, 1).unwrap();
                let ones = g.constant(g.value(y).clone());
                let loss = g.dot(y, ones).unwrap();
                g.backward(loss).unwrap();
            })
        });
    }
    group.finish();
}

fn encoder(c: &mut Criterion) {
    let mut group = c.benchmark_group("encoder");
    group.sample_size(10);
    for side in [32, 64] {
        let cfg = VggConfig { height: side, width: side, ..VggConfig::default() };
        let model = CaeModel::vgg(&cfg, 1).unwrap();
        let batch = uniform(&mut rng(2), &[16, 3, side, side], 0.0, 1.0);
        group.bench_with_input(BenchmarkId::new("batch16", side), &batch, |bench, batch| {
            bench.iter(|| model.encode(batch).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, encoder);
criterion_main!(benches);
