//! Metrics, baselines, sweeps and the synthetic data generator.

pub mod metrics;
pub mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{CandidateCatalog, InteractionRecord, ItemId};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::neighbor_index::NeighborGraph;
use crate::sampler::{FinalSelection, Retriever, SamplerConfig};
use crate::scoring::{
    bound_constrain, project_queries, score_items, ItemMode, ProjectedQueryBlock, DEFAULT_BOUND, DEFAULT_TAU,
};
use crate::trainer::UrmModel;

pub use metrics::{flops_estimate, recall_at_k, retrieval_precision, FlopEstimate, Precision};
pub use synthetic::{gen_synthetic, SyntheticData, SyntheticFiles, SyntheticSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
    /// Steps used for the per-tag recall table.
    pub steps: usize,
    /// The precision sweep covers `T = 1..=max_steps`.
    pub max_steps: usize,
    /// Seeds of the precision sweep, `0..n_seeds`.
    pub n_seeds: u64,
    pub tau: f64,
    pub init_subset: Option<usize>,
    pub bound: f64,
    pub mode: ItemMode,
    /// Evaluate at most this many records (the first ones), `None` for all.
    pub max_records: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 100,
            steps: 4,
            max_steps: 5,
            n_seeds: 20,
            tau: DEFAULT_TAU,
            init_subset: Some(100),
            bound: DEFAULT_BOUND,
            mode: ItemMode::Sum,
            max_records: Some(400),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn sampler(&self, steps: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            steps,
            k: self.k,
            tau: self.tau,
            init_subset: self.init_subset,
            seed,
            bound: self.bound,
            final_selection: FinalSelection::Sampled,
        }
    }
}

/// A test record with its projected queries and ground truth.
pub struct PreparedQuery {
    pub objective: String,
    pub queries: ProjectedQueryBlock<f32>,
    pub truth: HashSet<ItemId>,
    /// Original query block, needed by the sampler.
    pub block: crate::scoring::QueryBlock<f32>,
}

/// Generate and project the queries of every usable record.
pub fn prepare(model: &UrmModel<f32>, records: &[InteractionRecord], cfg: &EvalConfig) -> Result<Vec<PreparedQuery>> {
    let limit = cfg.max_records.unwrap_or(usize::MAX);
    records
        .iter()
        .filter(|r| !r.positives.is_empty())
        .take(limit)
        .map(|r| {
            let block = model.query_block(&r.history, &r.objective)?;
            let queries = project_queries(&model.mapping, &bound_constrain(&block, cfg.bound)?)?;
            Ok(PreparedQuery {
                objective: r.objective.clone(),
                queries,
                truth: r.positives.iter().copied().collect(),
                block,
            })
        })
        .collect()
}

/// Exact top-`k` of `candidates` (all items when `None`), ids only.
pub fn exact_topk(
    items: &Matrix<f32>,
    candidates: Option<&[ItemId]>,
    q: &ProjectedQueryBlock<f32>,
    k: usize,
) -> Result<Vec<ItemId>> {
    let all: Vec<ItemId>;
    let ids = match candidates {
        Some(c) => c,
        None => {
            all = (0..items.rows()).map(ItemId::from).collect();
            &all
        }
    };
    Ok(score_items(items, ids, q)?
        .top_k(k)
        .into_iter()
        .map(|(id, _)| id)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    /// `K / |C|`.
    pub random: f64,
    /// Mean recall of the `K` most frequent training items.
    pub popularity: f64,
}

pub fn baselines(catalog: &CandidateCatalog, queries: &[PreparedQuery], k: usize) -> Result<Baselines> {
    if queries.is_empty() {
        return Err(Error::Empty("no evaluation records".into()));
    }
    let mut by_freq: Vec<ItemId> = catalog.ids().collect();
    by_freq.sort_by(|a, b| {
        catalog.frequencies()[b.index()]
            .cmp(&catalog.frequencies()[a.index()])
            .then(a.cmp(b))
    });
    let mut total = 0.0;
    for q in queries {
        total += recall_at_k(&by_freq, &q.truth, k)?;
    }
    Ok(Baselines {
        random: (k as f64 / catalog.n_items() as f64).min(1.0),
        popularity: total / queries.len() as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagRecall {
    pub sampled: f64,
    pub oracle: f64,
    pub records: usize,
}

/// Mean R@K per objective tag, for the sampler and for exact scoring.
pub fn recall_by_tag(
    retriever: &Retriever<'_, f32>,
    queries: &[PreparedQuery],
    cfg: &EvalConfig,
) -> Result<BTreeMap<String, TagRecall>> {
    let sampler = cfg.sampler(cfg.steps, cfg.seed);
    let per: Vec<(f64, f64)> = queries
        .par_iter()
        .map(|q| {
            let got: Vec<ItemId> = retriever
                .retrieve(&q.block, &sampler)?
                .into_iter()
                .map(|(id, _)| id)
                .collect();
            let oracle = exact_topk(retriever.items(), None, &q.queries, cfg.k)?;
            Ok((
                recall_at_k(&got, &q.truth, cfg.k)?,
                recall_at_k(&oracle, &q.truth, cfg.k)?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut out: BTreeMap<String, TagRecall> = BTreeMap::new();
    for (q, (s, o)) in queries.iter().zip(per) {
        let e = out.entry(q.objective.clone()).or_insert(TagRecall {
            sampled: 0.0,
            oracle: 0.0,
            records: 0,
        });
        e.sampled += s;
        e.oracle += o;
        e.records += 1;
    }
    for e in out.values_mut() {
        e.sampled /= e.records as f64;
        e.oracle /= e.records as f64;
    }
    Ok(out)
}

/// One `(T, seed)` cell of the precision sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub seed: u64,
    /// Summed sampled recall over summed oracle recall; `NaN` if the latter is 0.
    pub precision: f64,
    pub sampled_recall: f64,
    pub oracle_recall: f64,
    /// Mean `|sampled ∩ oracle top-K| / K`.
    pub oracle_overlap: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionSummary {
    pub steps: usize,
    pub mean: f64,
    pub std: f64,
    pub oracle_overlap: f64,
}

/// Precision of the sampler against exact scoring for every `T` and seed.
pub fn precision_sweep(
    retriever: &Retriever<'_, f32>,
    queries: &[PreparedQuery],
    cfg: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    if queries.is_empty() {
        return Err(Error::Empty("no evaluation records".into()));
    }
    if cfg.max_steps == 0 {
        return Err(Error::InvalidArgument("max_steps must be at least 1".into()));
    }
    let oracles: Vec<Vec<ItemId>> = queries
        .par_iter()
        .map(|q| exact_topk(retriever.items(), None, &q.queries, cfg.k))
        .collect::<Result<_>>()?;
    let oracle_recall: Vec<f64> = queries
        .iter()
        .zip(&oracles)
        .map(|(q, o)| recall_at_k(o, &q.truth, cfg.k))
        .collect::<Result<_>>()?;
    let oracle_total: f64 = oracle_recall.iter().sum();

    let mut rows = Vec::new();
    for seed in 0..cfg.n_seeds {
        let sampler = cfg.sampler(cfg.max_steps, seed);
        // (recall, overlap) per record, per step.
        let per: Vec<Vec<(f64, f64)>> = queries
            .par_iter()
            .zip(&oracles)
            .map(|(q, oracle)| {
                let oracle: HashSet<ItemId> = oracle.iter().copied().collect();
                retriever
                    .retrieve_trace(&q.block, &sampler)?
                    .into_iter()
                    .map(|out| {
                        let ids: Vec<ItemId> = out.into_iter().map(|(id, _)| id).collect();
                        let overlap = ids.iter().filter(|id| oracle.contains(id)).count() as f64 / cfg.k as f64;
                        Ok((recall_at_k(&ids, &q.truth, cfg.k)?, overlap))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        for t in 0..cfg.max_steps {
            let sampled: f64 = per.iter().map(|r| r[t].0).sum();
            let overlap: f64 = per.iter().map(|r| r[t].1).sum();
            let n = queries.len() as f64;
            rows.push(SweepRow {
                steps: t + 1,
                seed,
                precision: Precision::new(sampled, oracle_total).precision,
                sampled_recall: sampled / n,
                oracle_recall: oracle_total / n,
                oracle_overlap: overlap / n,
            });
        }
    }
    rows.sort_by_key(|r| (r.steps, r.seed));
    Ok(rows)
}

pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<PrecisionSummary> {
    let mut by_t: BTreeMap<usize, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        by_t.entry(r.steps).or_default().push(r);
    }
    by_t.into_iter()
        .map(|(steps, rs)| {
            let n = rs.len() as f64;
            let mean = rs.iter().map(|r| r.precision).sum::<f64>() / n;
            let var = rs.iter().map(|r| (r.precision - mean).powi(2)).sum::<f64>() / n;
            PrecisionSummary {
                steps,
                mean,
                std: var.sqrt(),
                oracle_overlap: rs.iter().map(|r| r.oracle_overlap).sum::<f64>() / n,
            }
        })
        .collect()
}

/// `T,seed,precision` lines with a header.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("T,seed,precision\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6}", r.steps, r.seed, r.precision);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: ItemMode,
    /// Mean R@K with every item as a candidate.
    pub all: f64,
    /// Mean R@K with unseen items as candidates and unseen positives as truth.
    pub unseen: f64,
    pub unseen_records: usize,
}

/// Exact top-K recall for each item representation, over all items and over
/// the items without training interactions.
pub fn ablate_item_representation(
    model: &UrmModel<f32>,
    catalog: &CandidateCatalog,
    queries: &[PreparedQuery],
    k: usize,
) -> Result<Vec<AblationRow>> {
    if queries.is_empty() {
        return Err(Error::Empty("no evaluation records".into()));
    }
    let unseen = catalog.unseen_ids();
    let unseen_set: HashSet<ItemId> = unseen.iter().copied().collect();
    [ItemMode::Dis, ItemMode::Trans, ItemMode::Sum]
        .into_iter()
        .map(|mode| {
            let items = model.mapping.effective_items(mode);
            let per: Vec<(f64, Option<f64>)> = queries
                .par_iter()
                .map(|q| {
                    let all = recall_at_k(&exact_topk(&items, None, &q.queries, k)?, &q.truth, k)?;
                    let truth: HashSet<ItemId> = q.truth.intersection(&unseen_set).copied().collect();
                    let cold = if truth.is_empty() {
                        None
                    } else {
                        Some(recall_at_k(
                            &exact_topk(&items, Some(&unseen), &q.queries, k)?,
                            &truth,
                            k,
                        )?)
                    };
                    Ok((all, cold))
                })
                .collect::<Result<_>>()?;
            let cold: Vec<f64> = per.iter().filter_map(|p| p.1).collect();
            Ok(AblationRow {
                mode,
                all: per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64,
                unseen: if cold.is_empty() {
                    f64::NAN
                } else {
                    cold.iter().sum::<f64>() / cold.len() as f64
                },
                unseen_records: cold.len(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub n_items: usize,
    pub records: usize,
    pub config: EvalConfig,
    pub baselines: Baselines,
    pub recall_by_tag: BTreeMap<String, TagRecall>,
    pub precision: Vec<PrecisionSummary>,
    pub sweep: Vec<SweepRow>,
    pub ablation: Vec<AblationRow>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn sweep_csv(&self) -> String {
        sweep_csv(&self.sweep)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "items {}  records {}  K {}", self.n_items, self.records, self.k);
        let _ = writeln!(
            s,
            "baselines: random {:.4}  popularity {:.4}",
            self.baselines.random, self.baselines.popularity
        );
        let _ = writeln!(
            s,
            "\n{:<10} {:>9} {:>9} {:>8}",
            "objective", "sampled", "exact", "records"
        );
        for (tag, r) in &self.recall_by_tag {
            let _ = writeln!(s, "{:<10} {:>9.4} {:>9.4} {:>8}", tag, r.sampled, r.oracle, r.records);
        }
        let _ = writeln!(s, "\n{:<4} {:>10} {:>8} {:>9}", "T", "precision", "std", "overlap");
        for p in &self.precision {
            let _ = writeln!(
                s,
                "{:<4} {:>10.4} {:>8.4} {:>9.4}",
                p.steps, p.mean, p.std, p.oracle_overlap
            );
        }
        let _ = writeln!(s, "\n{:<6} {:>9} {:>9}", "mode", "all", "unseen");
        for a in &self.ablation {
            let _ = writeln!(s, "{:<6} {:>9.4} {:>9.4}", a.mode.to_string(), a.all, a.unseen);
        }
        s
    }
}

/// Full evaluation: baselines, per-tag recall, precision sweep and ablation.
pub fn evaluate(
    model: &UrmModel<f32>,
    catalog: &CandidateCatalog,
    graph: &NeighborGraph,
    records: &[InteractionRecord],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut timings = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut BTreeMap<String, f64>| {
        timings.insert(name.to_string(), clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };
    let queries = prepare(model, records, cfg)?;
    let retriever = Retriever::new(&model.mapping, graph, cfg.mode)?;
    lap("prepare", &mut timings);
    let baselines = baselines(catalog, &queries, cfg.k)?;
    let recall_by_tag = recall_by_tag(&retriever, &queries, cfg)?;
    lap("recall", &mut timings);
    let sweep = precision_sweep(&retriever, &queries, cfg)?;
    lap("sweep", &mut timings);
    let ablation = ablate_item_representation(model, catalog, &queries, cfg.k)?;
    lap("ablation", &mut timings);
    Ok(EvalReport {
        k: cfg.k,
        n_items: catalog.n_items(),
        records: queries.len(),
        config: cfg.clone(),
        baselines,
        recall_by_tag,
        precision: summarize_sweep(&sweep),
        sweep,
        ablation,
        timings,
    })
}
