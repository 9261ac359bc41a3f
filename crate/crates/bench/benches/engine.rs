use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lungvit_bench::{images, prediction_set, random_tensor};
use lungvit_core::metrics::{auroc, summarize};
use lungvit_core::{cross_entropy, AdamW, AdamWConfig, Graph, ViTConfig, ViTModel};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 64, 128] {
        let a = random_tensor(&[n, n], 1);
        let b = random_tensor(&[n, n], 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.param(a.clone()), g.param(b.clone()));
                let z = g.matmul(x, y).unwrap();
                let s = g.sum(z);
                g.backward(s).unwrap();
                black_box(g.grad(x))
            })
        });
    }
    group.finish();
}

fn vit_step(c: &mut Criterion) {
    let cfg = ViTConfig::tiny(3);
    let x = images(&cfg, 8, 3);
    let labels = [0, 1, 2, 0, 1, 2, 0, 1];
    c.bench_function("tiny_vit_forward", |bench| {
        let model = ViTModel::new(cfg.clone(), 0).unwrap();
        bench.iter(|| black_box(model.predict_proba(&x).unwrap()))
    });
    c.bench_function("tiny_vit_train_step", |bench| {
        let mut model = ViTModel::new(cfg.clone(), 0).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), 1e-4, model.params());
        bench.iter(|| {
            let mut g = Graph::new();
            let (logits, bound) = model.forward(&mut g, &x, None).unwrap();
            let loss = cross_entropy(&mut g, logits, &labels).unwrap();
            g.backward(loss).unwrap();
            let grads: Vec<_> = bound.vars.iter().map(|v| g.grad(*v)).collect();
            opt.step(model.params_mut(), &grads).unwrap();
        })
    });
}

fn metrics(c: &mut Criterion) {
    let set = prediction_set(2000, 7, 4);
    c.bench_function("auroc_2000x7", |bench| bench.iter(|| black_box(auroc(&set))));
    c.bench_function("summarize_2000x7", |bench| bench.iter(|| black_box(summarize(&set))));
}

criterion_group!(benches, matmul, vit_step, metrics);
criterion_main!(benches);
