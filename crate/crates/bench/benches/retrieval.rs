use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use urm_bench::{graph, mapping, queries};
use urm_core::neighbor_index::build_exact_knn_rows;
use urm_core::sampler::{Retriever, SamplerConfig};
use urm_core::scoring::{bound_constrain, project_queries, score_all, ItemMode};

const D: usize = 128;
const H: usize = 32;
const M: usize = 8;

fn scoring(c: &mut Criterion) {
    let mut group = c.benchmark_group("score_all");
    for n in [1_000, 10_000] {
        let m = mapping(n, D, H);
        let items = m.effective_items(ItemMode::Sum);
        let q = project_queries(&m, &bound_constrain(&queries(M, D, 0), 100.0).unwrap()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| score_all(black_box(&items), black_box(&q)).unwrap())
        });
    }
    group.finish();
}

fn knn(c: &mut Criterion) {
    let items = mapping(2_000, D, H).effective_items(ItemMode::Sum);
    let mut group = c.benchmark_group("exact_knn");
    group.sample_size(10);
    group.bench_function("2000x32_deg16", |b| {
        b.iter(|| build_exact_knn_rows(black_box(&items), 16).unwrap())
    });
    group.finish();
}

fn sampler(c: &mut Criterion) {
    let m = mapping(10_000, D, H);
    let g = graph(&m, 16);
    let retriever = Retriever::new(&m, &g, ItemMode::Sum).unwrap();
    let f = queries(M, D, 3);
    let mut group = c.benchmark_group("retrieve");
    for steps in [1, 4] {
        let cfg = SamplerConfig {
            steps,
            k: 100,
            init_subset: Some(100),
            ..Default::default()
        };
        group.bench_with_input(BenchmarkId::new("T", steps), &cfg, |b, cfg| {
            b.iter(|| retriever.retrieve(black_box(&f), cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, scoring, knn, sampler);
criterion_main!(benches);
