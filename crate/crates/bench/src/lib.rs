//! Fixtures shared by the benchmarks in `benches/`.

use std::sync::Arc;

use urm_core::linalg::Matrix;
use urm_core::rng;
use urm_core::scoring::{DecomposedMapping, ItemMode, QueryBlock};
use urm_core::NeighborGraph;

/// Random mapping with `n` items, query width `d`, rank `h` and 16 text dims.
pub fn mapping(n: usize, d: usize, h: usize) -> DecomposedMapping<f32> {
    let mut r = rng::stream(1, 100);
    DecomposedMapping::new(
        Matrix::random_normal(d, h, 1.0 / (d as f64).sqrt(), &mut r),
        Matrix::random_normal(n, h, 0.5, &mut r),
        Matrix::random_normal(16, h, 0.1, &mut r),
        Arc::new(Matrix::random_normal(n, 16, 1.0, &mut r)),
        true,
    )
    .expect("valid shapes")
}

pub fn queries(m: usize, d: usize, seed: u64) -> QueryBlock<f32> {
    QueryBlock::from_matrix(Matrix::random_normal(m, d, 1.0, &mut rng::stream(seed, 101))).expect("m >= 1")
}

pub fn graph(mapping: &DecomposedMapping<f32>, degree: usize) -> NeighborGraph {
    urm_core::neighbor_index::build_exact_knn_rows(&mapping.effective_items(ItemMode::Sum), degree).expect("graph")
}
