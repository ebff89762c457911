//! Central finite-difference checks of the analytic NCE gradients.
//!
//! Random instances are drawn in `f64` with query norms kept away from the
//! bound and score gaps between query columns kept away from zero, so the
//! loss is smooth at the checked point. Tie instances duplicate a query
//! column: the mapping parameters are still smooth there and are checked by
//! differences, while the query gradient is checked against the convention
//! (all of it on the first column, equal to the single-column model).

use std::sync::Arc;

use rand::Rng;

use crate::catalog::ItemId;
use crate::error::Result;
use crate::linalg::{dot, norm, Matrix};
use crate::rng::{self, EngineRng};
use crate::scoring::{bound_constrain, project_queries, DecomposedMapping, ItemMode, QueryBlock};
use crate::trainer::generator::ToyFeatureGenerator;
use crate::trainer::nce::{
    dense_rows, model_gradients, model_loss, nce_gradients, nce_loss, Example, NceOptions, UrmModel,
};

/// Step of the central differences.
pub const STEP: f64 = 1e-3;

/// Minimum distance of a query norm from the bound, relative to the bound.
const NORM_MARGIN: f64 = 0.05;
/// Minimum gap between the best and second-best column score of an item.
const SCORE_GAP: f64 = 0.05;
/// Minimum `‖Uᵀ f̄‖ / ‖f̄‖` when RMS normalization is on. The normalization's
/// curvature grows like the inverse square of this ratio, and near zero the
/// `O(h²)` difference error alone exceeds the tolerance.
const PROJECTION_RATIO: f64 = 0.4;
/// Instances whose whole gradient is smaller than this are redrawn.
const MIN_GRADIENT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InstanceKind {
    /// Mapping parameters and query block, distinct query columns.
    Mapping,
    /// As `Mapping`, with the second query column a copy of the first.
    Tie,
    /// Every parameter of mapping plus toy generator.
    Model,
}

/// Error of every parameter tensor of one instance, each relative to the
/// norm of the instance's whole gradient (a tensor that happens to sit near
/// a stationary point would otherwise divide a pure `O(h²)` residue by ~0).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub errors: Vec<(&'static str, f64)>,
    /// Query columns above the bound, and at or below it.
    pub clipped: usize,
    pub unclipped: usize,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().map(|e| e.1).fold(0.0, f64::max)
    }
}

/// `‖a - b‖ / max(‖a‖, ‖b‖, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / norm(analytic).max(norm(numeric)).max(1e-8)
}

type Pair = (&'static str, Vec<f64>, Vec<f64>);

/// Per-tensor errors relative to the whole gradient, or `None` when the
/// gradient is numerically zero (a saturated loss, where differences only
/// measure round-off).
fn instance_errors(pairs: Vec<Pair>) -> Option<Vec<(&'static str, f64)>> {
    let total = |pick: fn(&Pair) -> &Vec<f64>| {
        pairs
            .iter()
            .map(|p| pick(p).iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    };
    let scale = total(|p| &p.1).max(total(|p| &p.2));
    if scale < MIN_GRADIENT {
        return None;
    }
    Some(
        pairs
            .iter()
            .map(|(name, a, b)| {
                let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                (*name, diff / scale)
            })
            .collect(),
    )
}

fn central<F: FnMut(f64) -> Result<f64>>(x: f64, step: f64, mut loss: F) -> Result<f64> {
    Ok((loss(x + step)? - loss(x - step)?) / (2.0 * step))
}

/// Finite-difference gradient of `loss` over the slots of a tensor selected by
/// `slot` on a cloned parameter set.
fn numeric<P: Clone, F, S>(params: &P, len: usize, step: f64, mut slot: S, mut loss: F) -> Result<Vec<f64>>
where
    S: FnMut(&mut P, usize) -> &mut f64,
    F: FnMut(&P) -> Result<f64>,
{
    (0..len)
        .map(|k| {
            let x = *slot(&mut params.clone(), k);
            central(x, step, |v| {
                let mut p = params.clone();
                *slot(&mut p, k) = v;
                loss(&p)
            })
        })
        .collect()
}

struct Shape {
    n: usize,
    d: usize,
    h: usize,
    g: usize,
    m: usize,
}

fn draw_shape(rng: &mut EngineRng, min_m: usize) -> Shape {
    Shape {
        n: rng.random_range(6..11),
        d: rng.random_range(3..7),
        h: rng.random_range(2..5),
        g: rng.random_range(2..4),
        m: rng.random_range(min_m.max(1)..4),
    }
}

fn draw_mapping(rng: &mut EngineRng, s: &Shape) -> Result<DecomposedMapping<f64>> {
    let mut m = DecomposedMapping::new(
        Matrix::random_normal(s.d, s.h, 0.8, rng),
        Matrix::random_normal(s.n, s.h, 0.8, rng),
        Matrix::random_normal(s.g, s.h, 0.5, rng),
        Arc::new(Matrix::random_normal(s.n, s.g, 1.0, rng)),
        rng.random_bool(0.5),
    )?;
    for g in &mut m.gain {
        *g = rng.random_range(0.5..1.5);
    }
    Ok(m)
}

fn draw_ids(rng: &mut EngineRng, n: usize) -> (Vec<ItemId>, Vec<ItemId>) {
    let pos: Vec<ItemId> = (0..rng.random_range(1..4))
        .map(|_| ItemId::from(rng.random_range(0..n)))
        .collect();
    let mut neg: Vec<ItemId> = (0..rng.random_range(3..9))
        .map(|_| ItemId::from(rng.random_range(0..n)))
        .collect();
    // Sometimes a copy of a positive sits among the negatives.
    if rng.random_bool(0.3) {
        neg.push(pos[0]);
    }
    (pos, neg)
}

/// Column norms relative to the bound, or `None` if any is too close to it.
fn norm_branches(f: &QueryBlock<f64>, bound: f64) -> Option<(usize, usize)> {
    let mut above = 0;
    for j in 0..f.n_queries() {
        let n = norm(f.column(j));
        if (n - bound).abs() < NORM_MARGIN * bound {
            return None;
        }
        above += usize::from(n > bound);
    }
    Some((above, f.n_queries() - above))
}

/// Whether every touched item has a clear best column (ignoring the copied
/// column when `tie` is set) and the normalization is well conditioned.
fn gaps_ok(
    mapping: &DecomposedMapping<f64>,
    f: &QueryBlock<f64>,
    bound: f64,
    ids: &[ItemId],
    tie: bool,
) -> Result<bool> {
    let fbar = bound_constrain(f, bound)?;
    if mapping.head_norm {
        for j in 0..fbar.n_queries() {
            let col = fbar.column(j);
            if norm(&mapping.u.matvec_t(col)) < PROJECTION_RATIO * norm(col) {
                return Ok(false);
            }
        }
    }
    let q = project_queries(mapping, &fbar)?;
    for &id in ids {
        let row = mapping.effective_item_row(id, ItemMode::Sum)?;
        let mut s: Vec<f64> = (0..q.n_queries())
            .filter(|&j| !(tie && j == 1))
            .map(|j| dot(&row, q.column(j)))
            .collect();
        s.sort_by(|a, b| b.total_cmp(a));
        if s.len() > 1 && s[0] - s[1] < SCORE_GAP {
            return Ok(false);
        }
    }
    Ok(true)
}

fn draw_query(rng: &mut EngineRng, s: &Shape, bound: f64, tie: bool) -> Result<QueryBlock<f64>> {
    let cols: Vec<Vec<f64>> = (0..s.m)
        .map(|_| {
            let scale = if rng.random_bool(0.5) { 0.5 } else { 2.0 };
            let v: Vec<f64> = (0..s.d).map(|_| crate::linalg::standard_normal(rng)).collect();
            let n = norm(&v);
            v.iter()
                .map(|x| x / n * bound * scale * rng.random_range(0.8..1.2))
                .collect()
        })
        .collect();
    let mut cols = cols;
    if tie {
        cols[1] = cols[0].clone();
    }
    QueryBlock::from_columns(&cols)
}

fn mapping_checks(
    mapping: &DecomposedMapping<f64>,
    f: &QueryBlock<f64>,
    pos: &[ItemId],
    neg: &[ItemId],
    opts: &NceOptions,
    tie: bool,
    step: f64,
) -> Result<Vec<Pair>> {
    let (_, grads) = nce_gradients(mapping, f, pos, neg, opts)?;
    let loss = |m: &DecomposedMapping<f64>| nce_loss(m, f, pos, neg, opts);
    let (n, d, h, g) = (
        mapping.n_items(),
        mapping.feature_dim(),
        mapping.rank(),
        mapping.p_trans.rows(),
    );
    let mut out = Vec::new();

    let fd = numeric(mapping, d * h, step, |m, k| &mut m.u.as_mut_slice()[k], loss)?;
    out.push(("U", grads.u.clone(), fd));
    if mapping.head_norm {
        let fd = numeric(mapping, h, step, |m, k| &mut m.gain[k], loss)?;
        out.push(("gain", grads.gain.clone(), fd));
    }
    let fd = numeric(mapping, n * h, step, |m, k| &mut m.v_dis.as_mut_slice()[k], loss)?;
    out.push(("V_dis", dense_rows(&grads.item_rows, n, h).as_slice().to_vec(), fd));
    let fd = numeric(mapping, g * h, step, |m, k| &mut m.p_trans.as_mut_slice()[k], loss)?;
    out.push(("P_trans", grads.p_trans(mapping), fd));

    let analytic_f: Vec<f64> = grads.query.concat();
    if tie {
        // Convention at the tie: column 1 gets nothing, column 0 gets the
        // gradient of the model with the duplicate removed.
        let mut cols: Vec<Vec<f64>> = (0..f.n_queries()).map(|j| f.column(j).to_vec()).collect();
        cols.remove(1);
        let reduced = QueryBlock::from_columns(&cols)?;
        let (_, rg) = nce_gradients(mapping, &reduced, pos, neg, opts)?;
        let mut expect = rg.query.clone();
        expect.insert(1, vec![0.0; d]);
        out.push(("F(tie)", analytic_f, expect.concat()));
    } else {
        let m_cols = f.n_queries();
        let fd = numeric(
            &f.as_matrix().clone(),
            m_cols * d,
            step,
            |m, k| &mut m.as_mut_slice()[k],
            |m| nce_loss(mapping, &QueryBlock::from_matrix(m.clone())?, pos, neg, opts),
        )?;
        out.push(("F", analytic_f, fd));
    }
    Ok(out)
}

fn model_checks(
    model: &UrmModel<f64>,
    ex: &Example<'_>,
    neg: &[ItemId],
    opts: &NceOptions,
    step: f64,
) -> Result<Vec<Pair>> {
    let (_, grads) = model_gradients(model, ex, neg, opts)?;
    let loss = |m: &UrmModel<f64>| model_loss(m, ex, neg, opts);
    let gen = &model.generator;
    let (n, de, nt) = (gen.item_embed.rows(), gen.embed_dim(), gen.objective_embed.rows());
    let mut out = Vec::new();
    let h = model.mapping.rank();

    let fd = numeric(
        model,
        model.mapping.u.as_slice().len(),
        step,
        |m, k| &mut m.mapping.u.as_mut_slice()[k],
        loss,
    )?;
    out.push(("U", grads.mapping.u.clone(), fd));
    let fd = numeric(model, n * h, step, |m, k| &mut m.mapping.v_dis.as_mut_slice()[k], loss)?;
    out.push((
        "V_dis",
        dense_rows(&grads.mapping.item_rows, n, h).as_slice().to_vec(),
        fd,
    ));
    let fd = numeric(
        model,
        gen.heads.as_slice().len(),
        step,
        |m, k| &mut m.generator.heads.as_mut_slice()[k],
        loss,
    )?;
    out.push(("heads", grads.heads.clone(), fd));
    let fd = numeric(
        model,
        nt * de,
        step,
        |m, k| &mut m.generator.objective_embed.as_mut_slice()[k],
        loss,
    )?;
    out.push((
        "objective_embed",
        dense_rows(&grads.objective_embed, nt, de).as_slice().to_vec(),
        fd,
    ));
    let fd = numeric(
        model,
        n * de,
        step,
        |m, k| &mut m.generator.item_embed.as_mut_slice()[k],
        loss,
    )?;
    out.push((
        "item_embed",
        dense_rows(&grads.item_embed, n, de).as_slice().to_vec(),
        fd,
    ));
    Ok(out)
}

/// Check one random instance; `seed` fixes everything. Draws are repeated
/// until the instance is away from every kink and its gradient is not
/// numerically zero.
pub fn check_instance(seed: u64, kind: InstanceKind) -> Result<GradCheck> {
    check_instance_with_step(seed, kind, STEP)
}

/// As [`check_instance`] with a custom difference step.
pub fn check_instance_with_step(seed: u64, kind: InstanceKind, step: f64) -> Result<GradCheck> {
    let mut rng = rng::stream(seed, 0x6772_6164);
    loop {
        let shape = draw_shape(&mut rng, if kind == InstanceKind::Tie { 2 } else { 1 });
        let mapping = draw_mapping(&mut rng, &shape)?;
        let (pos, neg) = draw_ids(&mut rng, shape.n);
        let opts = NceOptions {
            bound: rng.random_range(1.0..4.0),
            logit_scale: if rng.random_bool(0.5) { 1.0 } else { 2.0 },
        };
        let touched: Vec<ItemId> = pos.iter().chain(&neg).copied().collect();

        if kind == InstanceKind::Model {
            let tags = vec!["A".to_string(), "B".to_string()];
            let de = rng.random_range(2..5);
            let gen = ToyFeatureGenerator::<f64>::init(shape.n, tags, de, shape.d, shape.m, 1.0, &mut rng)?;
            let history: Vec<ItemId> = (0..rng.random_range(1..5))
                .map(|_| ItemId::from(rng.random_range(0..shape.n)))
                .collect();
            let objective = if rng.random_bool(0.8) { "B" } else { "unknown" };
            let model = UrmModel {
                mapping,
                generator: gen,
            };
            let f = model.query_block(&history, objective)?;
            let Some((clipped, unclipped)) = norm_branches(&f, opts.bound) else {
                continue;
            };
            if !gaps_ok(&model.mapping, &f, opts.bound, &touched, false)? {
                continue;
            }
            let ex = Example {
                history: &history,
                objective,
                positives: &pos,
            };
            let Some(errors) = instance_errors(model_checks(&model, &ex, &neg, &opts, step)?) else {
                continue;
            };
            return Ok(GradCheck {
                errors,
                clipped,
                unclipped,
            });
        }

        let tie = kind == InstanceKind::Tie;
        let f = draw_query(&mut rng, &shape, opts.bound, tie)?;
        let Some((clipped, unclipped)) = norm_branches(&f, opts.bound) else {
            continue;
        };
        if !gaps_ok(&mapping, &f, opts.bound, &touched, tie)? {
            continue;
        }
        let Some(errors) = instance_errors(mapping_checks(&mapping, &f, &pos, &neg, &opts, tie, step)?) else {
            continue;
        };
        return Ok(GradCheck {
            errors,
            clipped,
            unclipped,
        });
    }
}

/// The instance mix used by the test suites: mostly plain mapping checks,
/// with every fourth instance a tie and every third a full model.
pub fn instance_kind(i: u64) -> InstanceKind {
    if i % 4 == 3 {
        InstanceKind::Tie
    } else if i % 3 == 2 {
        InstanceKind::Model
    } else {
        InstanceKind::Mapping
    }
}
