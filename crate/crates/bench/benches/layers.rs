use co4_bench::{bench_config, fixture, NS};
use co4_core::model::forward_hidden;
use co4_core::{Graph, LayerKind};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for kind in [LayerKind::Co4, LayerKind::Baseline] {
        let cfg = bench_config(kind, *NS.last().unwrap());
        for n in NS {
            let (params, tokens) = fixture(&cfg, n).unwrap();
            group.throughput(Throughput::Elements(n as u64));
            group.bench_with_input(BenchmarkId::new(kind.to_string(), n), &tokens, |b, tokens| {
                b.iter(|| {
                    let g = Graph::no_grad();
                    let vars = params.register(&g);
                    forward_hidden(&vars, &cfg, tokens, None).unwrap().value().data()[0]
                })
            });
        }
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_backward");
    group.sample_size(10);
    for kind in [LayerKind::Co4, LayerKind::Baseline] {
        let cfg = bench_config(kind, 512);
        let (params, tokens) = fixture(&cfg, 512).unwrap();
        group.bench_function(kind.to_string(), |b| {
            b.iter(|| {
                let g = Graph::new();
                let vars = params.register(&g);
                let loss = forward_hidden(&vars, &cfg, &tokens, None).unwrap().sum_all().unwrap();
                g.backward(&loss).unwrap().named().numel()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward, forward_backward);
criterion_main!(benches);
