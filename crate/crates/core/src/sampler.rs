//! Iterative probabilistic sampling with neighbor expansion.
//!
//! Starting from a uniform random pool, each step scores the pool, draws `K`
//! distinct items from `softmax(score / tau)` and replaces the pool with the
//! drawn items plus their graph neighbors. The result is the last draw.
//!
//! Sampling without replacement uses Gumbel-top-K: the `K` largest keys
//! `score + tau * g` with `g` iid standard Gumbel. Step `t` draws its noise
//! from ChaCha8 stream `SAMPLER_STEP_BASE + t` of the request seed, and the
//! pool is kept sorted by id, so a run is a pure function of its inputs.

use std::sync::Arc;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::ItemId;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real};
use crate::neighbor_index::NeighborGraph;
use crate::rng::{self, gumbel, streams};
use crate::scoring::{
    bound_constrain, project_queries, score_items, sort_desc, DecomposedMapping, ItemMode, ProjectedQueryBlock,
    QueryBlock, ScoreVector, DEFAULT_BOUND, DEFAULT_TAU,
};

const PARALLEL_POOL: usize = 8192;

/// What `retrieve` returns after the last step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalSelection {
    /// The last sampled set.
    #[default]
    Sampled,
    /// Exact top-K of the last expanded pool.
    TopkPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of sampling steps `T`.
    pub steps: usize,
    /// Items drawn per step.
    pub k: usize,
    pub tau: f64,
    /// Initial pool size; `None` means `10 * k`.
    pub init_subset: Option<usize>,
    pub seed: u64,
    pub bound: f64,
    pub final_selection: FinalSelection,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 4,
            k: 1000,
            tau: DEFAULT_TAU,
            init_subset: None,
            seed: 0,
            bound: DEFAULT_BOUND,
            final_selection: FinalSelection::Sampled,
        }
    }
}

impl SamplerConfig {
    pub fn init_subset(&self) -> usize {
        self.init_subset.unwrap_or(10 * self.k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("T must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.bound > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "B must be positive, got {}",
                self.bound
            )));
        }
        if self.init_subset() < self.k {
            return Err(Error::InvalidArgument(format!(
                "init_subset {} is smaller than K {}",
                self.init_subset(),
                self.k
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SamplerState {
    /// Current candidate pool `N(t)`, ascending ids.
    pub pool: Vec<ItemId>,
    /// Last sampled set `S(t)` with raw scores, in selection order.
    pub sampled: Vec<(ItemId, f64)>,
    pub step: usize,
}

/// `N(0)`: `init_subset` distinct items drawn uniformly (clamped to `|C|`).
pub fn init_pool(n_items: usize, config: &SamplerConfig) -> Result<SamplerState> {
    if n_items == 0 {
        return Err(Error::Empty("cannot sample from an empty catalog".into()));
    }
    let amount = config.init_subset().min(n_items);
    let mut rng = rng::stream(config.seed, streams::INIT_POOL);
    let mut pool: Vec<ItemId> = index::sample(&mut rng, n_items, amount)
        .into_iter()
        .map(ItemId::from)
        .collect();
    pool.sort_unstable();
    Ok(SamplerState {
        pool,
        sampled: Vec::new(),
        step: 0,
    })
}

fn score_pool<T: Real>(items: &Matrix<T>, pool: &[ItemId], q: &ProjectedQueryBlock<T>) -> Result<ScoreVector> {
    if pool.len() < PARALLEL_POOL {
        return score_items(items, pool, q);
    }
    let parts: Vec<ScoreVector> = pool
        .par_chunks(PARALLEL_POOL / 4)
        .map(|c| score_items(items, c, q))
        .collect::<Result<_>>()?;
    let mut out = ScoreVector::default();
    for p in parts {
        out.ids.extend(p.ids);
        out.scores.extend(p.scores);
    }
    Ok(out)
}

/// Draw `min(k, |pool|)` distinct items by Gumbel-top-K with temperature `tau`.
pub fn gumbel_top_k(scores: &ScoreVector, k: usize, tau: f64, seed: u64, stream: u64) -> Vec<(ItemId, f64)> {
    let mut rng = rng::stream(seed, stream);
    let mut keyed: Vec<(ItemId, f64, f64)> = scores
        .ids
        .iter()
        .zip(&scores.scores)
        .map(|(&id, &s)| (id, s + tau * gumbel(&mut rng), s))
        .collect();
    let cmp = |a: &(ItemId, f64, f64), b: &(ItemId, f64, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    let k = k.min(keyed.len());
    if k < keyed.len() && k > 0 {
        keyed.select_nth_unstable_by(k - 1, cmp);
        keyed.truncate(k);
    }
    keyed.sort_by(cmp);
    keyed.truncate(k);
    keyed.into_iter().map(|(id, _, s)| (id, s)).collect()
}

/// One sampling step: score `N(t-1)`, draw `S(t)`, expand to `N(t)`.
pub fn sample_step<T: Real>(
    state: &SamplerState,
    items: &Matrix<T>,
    q: &ProjectedQueryBlock<T>,
    graph: &NeighborGraph,
    config: &SamplerConfig,
) -> Result<SamplerState> {
    if state.pool.is_empty() {
        return Err(Error::Empty("sampler pool is empty".into()));
    }
    let step = state.step + 1;
    let scores = score_pool(items, &state.pool, q)?;
    let sampled = gumbel_top_k(
        &scores,
        config.k,
        config.tau,
        config.seed,
        streams::SAMPLER_STEP_BASE + step as u64,
    );
    let mut pool = Vec::with_capacity(sampled.len() * (graph.degree() + 1));
    for &(id, _) in &sampled {
        pool.push(id);
        pool.extend_from_slice(graph.neighbors(id)?);
    }
    pool.sort_unstable();
    pool.dedup();
    Ok(SamplerState { pool, sampled, step })
}

/// Shared read-only inputs of a retrieval: mapping, its effective item rows
/// and the neighbor graph built over them.
pub struct Retriever<'a, T: Real = f32> {
    mapping: &'a DecomposedMapping<T>,
    items: Arc<Matrix<T>>,
    graph: &'a NeighborGraph,
}

impl<'a, T: Real> Retriever<'a, T> {
    pub fn new(mapping: &'a DecomposedMapping<T>, graph: &'a NeighborGraph, mode: ItemMode) -> Result<Self> {
        Self::with_items(mapping, mapping.effective_items(mode), graph)
    }

    /// Use precomputed effective item rows, e.g. shared between requests.
    pub fn with_items(
        mapping: &'a DecomposedMapping<T>,
        items: impl Into<Arc<Matrix<T>>>,
        graph: &'a NeighborGraph,
    ) -> Result<Self> {
        let items = items.into();
        if graph.n_items() != mapping.n_items() || items.rows() != mapping.n_items() {
            return Err(Error::DimensionMismatch(format!(
                "graph has {} items, mapping {}, item rows {}",
                graph.n_items(),
                mapping.n_items(),
                items.rows()
            )));
        }
        Ok(Retriever { mapping, items, graph })
    }

    pub fn items(&self) -> &Matrix<T> {
        &self.items
    }

    pub fn mapping(&self) -> &DecomposedMapping<T> {
        self.mapping
    }

    pub fn graph(&self) -> &NeighborGraph {
        self.graph
    }

    /// Bound and project a query block.
    pub fn project(&self, f: &QueryBlock<T>, config: &SamplerConfig) -> Result<ProjectedQueryBlock<T>> {
        project_queries(self.mapping, &bound_constrain(f, config.bound)?)
    }

    /// Final retrieval list: descending score, then ascending id.
    pub fn retrieve(&self, f: &QueryBlock<T>, config: &SamplerConfig) -> Result<Vec<(ItemId, f64)>> {
        Ok(self.retrieve_trace(f, config)?.pop().expect("at least one step"))
    }

    /// Output after every step `1..=T`, each as `retrieve` would return it for
    /// that step count.
    pub fn retrieve_trace(&self, f: &QueryBlock<T>, config: &SamplerConfig) -> Result<Vec<Vec<(ItemId, f64)>>> {
        config.validate()?;
        let q = self.project(f, config)?;
        let mut state = init_pool(self.items.rows(), config)?;
        let mut out = Vec::with_capacity(config.steps);
        for _ in 0..config.steps {
            state = sample_step(&state, &self.items, &q, self.graph, config)?;
            let mut result = match config.final_selection {
                FinalSelection::Sampled => state.sampled.clone(),
                FinalSelection::TopkPool => score_pool(&self.items, &state.pool, &q)?.top_k(config.k),
            };
            sort_desc(&mut result);
            out.push(result);
        }
        Ok(out)
    }
}

/// Convenience wrapper over [`Retriever`] with sum-mode item rows.
pub fn retrieve<T: Real>(
    mapping: &DecomposedMapping<T>,
    f: &QueryBlock<T>,
    graph: &NeighborGraph,
    config: &SamplerConfig,
) -> Result<Vec<(ItemId, f64)>> {
    Retriever::new(mapping, graph, ItemMode::Sum)?.retrieve(f, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neighbor_index::build_exact_knn_rows;
    use crate::scoring::score_all;
    use std::collections::HashSet;
    use std::sync::Arc;

    fn random_mapping(n: usize, h: usize, seed: u64) -> DecomposedMapping<f32> {
        let mut r = rng::stream(seed, 99);
        DecomposedMapping::new(
            Matrix::random_normal(h, h, 1.0, &mut r),
            Matrix::random_normal(n, h, 1.0, &mut r),
            Matrix::zeros(1, h),
            Arc::new(Matrix::zeros(n, 1)),
            false,
        )
        .unwrap()
    }

    fn query(m: usize, d: usize, seed: u64) -> QueryBlock<f32> {
        let mut r = rng::stream(seed, 98);
        QueryBlock::from_matrix(Matrix::random_normal(m, d, 1.0, &mut r)).unwrap()
    }

    fn cfg(k: usize, steps: usize) -> SamplerConfig {
        SamplerConfig {
            steps,
            k,
            seed: 17,
            ..Default::default()
        }
    }

    #[test]
    fn full_init_pool_is_whole_catalog() {
        let c = SamplerConfig {
            init_subset: Some(50),
            ..cfg(5, 1)
        };
        let s = init_pool(50, &c).unwrap();
        assert_eq!(s.pool, (0..50).map(ItemId::from).collect::<Vec<_>>());
        let clamped = init_pool(20, &c).unwrap();
        assert_eq!(clamped.pool.len(), 20);
        assert!(init_pool(0, &c).is_err());
    }

    #[test]
    fn init_pool_depends_only_on_seed() {
        let c = cfg(10, 1);
        assert_eq!(init_pool(1000, &c).unwrap(), init_pool(1000, &c).unwrap());
        let other = SamplerConfig { seed: 18, ..c.clone() };
        assert_ne!(init_pool(1000, &c).unwrap().pool, init_pool(1000, &other).unwrap().pool);
    }

    #[test]
    fn init_pool_overlap_matches_hypergeometric_mean() {
        // E|A ∩ B| = m^2 / n for independent uniform m-subsets of n items.
        let (n, m) = (10_000usize, 1000usize);
        let trials = 40;
        let mut total = 0usize;
        for s in 0..trials {
            let a: HashSet<ItemId> = init_pool(
                n,
                &SamplerConfig {
                    seed: 2 * s,
                    init_subset: Some(m),
                    ..cfg(10, 1)
                },
            )
            .unwrap()
            .pool
            .into_iter()
            .collect();
            let b = init_pool(
                n,
                &SamplerConfig {
                    seed: 2 * s + 1,
                    init_subset: Some(m),
                    ..cfg(10, 1)
                },
            )
            .unwrap();
            total += b.pool.iter().filter(|i| a.contains(i)).count();
        }
        let mean = total as f64 / trials as f64;
        let expect = (m * m) as f64 / n as f64;
        // hypergeometric sd is about 9, so 4 sd of the mean over 40 trials is under 6
        assert!((mean - expect).abs() < 6.0, "mean overlap {mean}, expected {expect}");
    }

    #[test]
    fn zero_temperature_step_is_exact_top_k() {
        let m = random_mapping(200, 4, 1);
        let items = m.effective_items(ItemMode::Sum);
        let g = build_exact_knn_rows(&items, 4).unwrap();
        let c = SamplerConfig {
            tau: 1e-9,
            init_subset: Some(200),
            ..cfg(15, 1)
        };
        let f = bound_constrain(&query(3, 4, 2), 100.0).unwrap();
        let q = project_queries(&m, &f).unwrap();
        let state = init_pool(200, &c).unwrap();
        let next = sample_step(&state, &items, &q, &g, &c).unwrap();
        let want = score_all(&items, &q).unwrap().top_k(15);
        assert_eq!(next.sampled, want);
        assert!(next.pool.len() <= 15 * (g.degree() + 1));
    }

    #[test]
    fn pool_of_size_k_is_returned_whole() {
        let m = random_mapping(30, 3, 4);
        let g = build_exact_knn_rows(&m.effective_items(ItemMode::Sum), 3).unwrap();
        let c = SamplerConfig {
            init_subset: Some(30),
            ..cfg(30, 3)
        };
        let out = retrieve(&m, &query(2, 3, 5), &g, &c).unwrap();
        let got: HashSet<ItemId> = out.iter().map(|p| p.0).collect();
        assert_eq!(got.len(), 30);
    }

    #[test]
    fn single_step_frequencies_match_softmax() {
        // 5-item pool, K = 1: empirical draw frequencies vs exact softmax.
        let scores = ScoreVector {
            ids: (0..5).map(ItemId::from).collect(),
            scores: vec![0.10, 0.05, 0.0, -0.07, 0.02],
        };
        let tau = DEFAULT_TAU;
        let p = crate::scoring::softmax_tau(&scores.scores, tau).unwrap();
        let runs = 100_000u64;
        let mut counts = [0u64; 5];
        for s in 0..runs {
            let pick = gumbel_top_k(&scores, 1, tau, s, 1);
            counts[pick[0].0.index()] += 1;
        }
        for i in 0..5 {
            let expect = p[i] * runs as f64;
            let sd = (runs as f64 * p[i] * (1.0 - p[i])).sqrt();
            assert!(
                (counts[i] as f64 - expect).abs() <= 3.0 * sd,
                "item {i}: {} vs {expect:.1} ± {sd:.1}",
                counts[i]
            );
        }
    }

    #[test]
    fn retrieve_rejects_zero_steps_and_is_deterministic() {
        let m = random_mapping(300, 4, 7);
        let g = build_exact_knn_rows(&m.effective_items(ItemMode::Sum), 5).unwrap();
        let f = query(2, 4, 8);
        assert!(retrieve(&m, &f, &g, &cfg(10, 0)).is_err());
        let c = SamplerConfig {
            init_subset: Some(40),
            ..cfg(10, 3)
        };
        let a = retrieve(&m, &f, &g, &c).unwrap();
        assert_eq!(a, retrieve(&m, &f, &g, &c).unwrap());
        assert_eq!(a.len(), 10);
        let ids: HashSet<ItemId> = a.iter().map(|x| x.0).collect();
        assert_eq!(ids.len(), 10);
        assert!(a
            .windows(2)
            .all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
    }

    #[test]
    fn trace_prefix_matches_shorter_runs() {
        let m = random_mapping(300, 4, 9);
        let g = build_exact_knn_rows(&m.effective_items(ItemMode::Sum), 5).unwrap();
        let f = query(2, 4, 10);
        let c = SamplerConfig {
            init_subset: Some(40),
            ..cfg(10, 4)
        };
        let r = Retriever::new(&m, &g, ItemMode::Sum).unwrap();
        let trace = r.retrieve_trace(&f, &c).unwrap();
        for t in 1..=4 {
            let short = SamplerConfig { steps: t, ..c.clone() };
            assert_eq!(trace[t - 1], r.retrieve(&f, &short).unwrap());
        }
    }

    #[test]
    fn topk_pool_selection_returns_best_of_pool() {
        let m = random_mapping(300, 4, 11);
        let g = build_exact_knn_rows(&m.effective_items(ItemMode::Sum), 5).unwrap();
        let c = SamplerConfig {
            init_subset: Some(300),
            tau: 1e-9,
            final_selection: FinalSelection::TopkPool,
            ..cfg(10, 1)
        };
        let out = retrieve(&m, &query(2, 4, 12), &g, &c).unwrap();
        assert_eq!(out.len(), 10);
    }

    #[test]
    fn invalid_configs() {
        assert!(SamplerConfig { tau: 0.0, ..cfg(1, 1) }.validate().is_err());
        assert!(SamplerConfig { k: 0, ..cfg(1, 1) }.validate().is_err());
        assert!(SamplerConfig {
            init_subset: Some(3),
            ..cfg(5, 1)
        }
        .validate()
        .is_err());
        assert!(cfg(5, 1).validate().is_ok());
    }
}
