use std::collections::BTreeSet;

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use lfr_bench::{desk_corpora, desk_model};
use lfr_core::eval::translate_corpus;
use lfr_core::fisher::empirical_fisher_diag_multi;
use lfr_core::model::Batch;
use lfr_core::region::{search_cm, RegionSearchConfig};
use lfr_core::tensor::{Graph, Tensor};

fn matmul(c: &mut Criterion) {
    for n in [32usize, 128] {
        let a = Tensor::new(vec![n, n], (0..n * n).map(|i| (i % 7) as f64 * 0.1).collect()).unwrap();
        let b = Tensor::new(vec![n, n], (0..n * n).map(|i| (i % 5) as f64 * 0.2).collect()).unwrap();
        c.bench_function(&format!("matmul_fwd_bwd_{n}"), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.param(a.clone());
                let y = g.param(b.clone());
                let z = g.matmul(x, y).unwrap();
                let s = g.sum(z);
                g.backward(s).unwrap();
                black_box(g.grad(x).map(|v| v[0]))
            })
        });
    }
}

fn model(c: &mut Criterion) {
    let (valid, vocab) = desk_corpora(32);
    let model = desk_model(vocab);
    let batch = Batch::from_pairs(valid[0].pairs.iter()).unwrap();
    c.bench_function("model_loss_and_grad_batch32", |b| {
        b.iter(|| black_box(model.loss_and_grad(&batch, None).unwrap().0))
    });
    c.bench_function("greedy_decode_corpus32", |b| b.iter(|| black_box(translate_corpus(&model, &valid[0]).unwrap())));
}

fn fisher_and_region(c: &mut Criterion) {
    let (valid, vocab) = desk_corpora(16);
    let model = desk_model(vocab);
    c.bench_function("empirical_fisher_64_sentences", |b| {
        b.iter(|| black_box(empirical_fisher_diag_multi(&model, &valid).unwrap().sample_count))
    });
    let fisher = empirical_fisher_diag_multi(&model, &valid).unwrap();
    let cfg = RegionSearchConfig::default();
    c.bench_function("search_cm", |b| {
        b.iter(|| black_box(search_cm(&model.params, &BTreeSet::new(), &fisher, &cfg).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = matmul, model, fisher_and_region
}
criterion_main!(benches);
