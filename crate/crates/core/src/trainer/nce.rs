//! Sampled-softmax NCE objective and its exact gradients.
//!
//! For each positive `v` the loss term is
//! `-s_v + log(exp(s_v) + Σ_{z∈N} exp(s_z))`, where `s_x` is the multi-query
//! max score of item `x` and `N` is the negative list with copies of `v`
//! removed. All intermediate arithmetic is `f64` regardless of the parameter
//! element type.
//!
//! Subgradient conventions: at a tie in the max over query columns the whole
//! gradient goes to the smallest maximizing column; a query column whose
//! norm equals the bound exactly takes the identity branch.

use std::collections::{BTreeMap, HashMap};

use crate::catalog::ItemId;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, Real};
use crate::scoring::{DecomposedMapping, ItemMode, QueryBlock, DEFAULT_BOUND, RMS_EPS};
use crate::trainer::generator::ToyFeatureGenerator;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NceOptions {
    pub bound: f64,
    /// Multiplier applied to scores inside the loss (`1 / tau` when training
    /// with a temperature).
    pub logit_scale: f64,
}

impl Default for NceOptions {
    fn default() -> Self {
        NceOptions {
            bound: DEFAULT_BOUND,
            logit_scale: 1.0,
        }
    }
}

/// Effective item rows (`f64`) for the items a loss evaluation touches.
#[derive(Clone, Debug, Default)]
pub struct RowCache {
    slot: HashMap<ItemId, usize>,
    ids: Vec<ItemId>,
    rows: Vec<Vec<f64>>,
}

impl RowCache {
    pub fn build<T: Real>(mapping: &DecomposedMapping<T>, ids: impl IntoIterator<Item = ItemId>) -> Result<Self> {
        let mut cache = RowCache::default();
        for id in ids {
            if cache.slot.contains_key(&id) {
                continue;
            }
            let row = mapping.effective_item_row(id, ItemMode::Sum)?;
            cache.slot.insert(id, cache.ids.len());
            cache.ids.push(id);
            cache.rows.push(row.iter().map(|x| x.to_f64().unwrap()).collect());
        }
        Ok(cache)
    }

    fn get(&self, id: ItemId) -> Result<usize> {
        self.slot
            .get(&id)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("item {id} missing from row cache")))
    }
}

/// Forward state of the query side for one block.
struct QuerySide {
    fbar: Vec<Vec<f64>>,
    f_raw: Vec<Vec<f64>>,
    norms: Vec<f64>,
    y: Vec<Vec<f64>>,
    rms: Vec<f64>,
    x: Vec<Vec<f64>>,
}

fn query_forward<T: Real>(mapping: &DecomposedMapping<T>, f: &[Vec<f64>], bound: f64) -> QuerySide {
    let (d, h) = (mapping.feature_dim(), mapping.rank());
    let gain: Vec<f64> = mapping.gain.iter().map(|g| g.to_f64().unwrap()).collect();
    let mut qs = QuerySide {
        fbar: Vec::new(),
        f_raw: f.to_vec(),
        norms: Vec::new(),
        y: Vec::new(),
        rms: Vec::new(),
        x: Vec::new(),
    };
    for col in f {
        let n = dot(col, col).sqrt();
        let fbar: Vec<f64> = if n > bound {
            col.iter().map(|v| v * bound / n).collect()
        } else {
            col.clone()
        };
        let mut y = vec![0.0; h];
        for (i, &fi) in fbar.iter().enumerate().take(d) {
            if fi == 0.0 {
                continue;
            }
            for (yk, &u) in y.iter_mut().zip(mapping.u.row(i)) {
                *yk += fi * u.to_f64().unwrap();
            }
        }
        let (x, rms) = if mapping.head_norm {
            let rms = (dot(&y, &y) / h as f64 + RMS_EPS).sqrt();
            (y.iter().zip(&gain).map(|(v, g)| v * g / rms).collect(), rms)
        } else {
            (y.clone(), 1.0)
        };
        qs.norms.push(n);
        qs.fbar.push(fbar);
        qs.y.push(y);
        qs.rms.push(rms);
        qs.x.push(x);
    }
    qs
}

/// Backprop from `dL/dx_j` to U, gain and the raw query columns.
fn query_backward<T: Real>(
    mapping: &DecomposedMapping<T>,
    qs: &QuerySide,
    dx: &[Vec<f64>],
    bound: f64,
    du: &mut [f64],
    dgain: &mut [f64],
) -> Vec<Vec<f64>> {
    let (d, h) = (mapping.feature_dim(), mapping.rank());
    let gain: Vec<f64> = mapping.gain.iter().map(|g| g.to_f64().unwrap()).collect();
    let mut df_all = Vec::with_capacity(dx.len());
    for (j, dxj) in dx.iter().enumerate() {
        let y = &qs.y[j];
        let dy: Vec<f64> = if mapping.head_norm {
            let r = qs.rms[j];
            for k in 0..h {
                dgain[k] += dxj[k] * y[k] / r;
            }
            let a: Vec<f64> = dxj.iter().zip(&gain).map(|(d, g)| d * g).collect();
            let ay = dot(&a, y);
            (0..h).map(|k| a[k] / r - ay * y[k] / (h as f64 * r * r * r)).collect()
        } else {
            dxj.clone()
        };
        let fbar = &qs.fbar[j];
        let mut dfbar = vec![0.0; d];
        for i in 0..d {
            let urow = mapping.u.row(i);
            let fi = fbar[i];
            let dst = &mut du[i * h..(i + 1) * h];
            let mut acc = 0.0;
            for k in 0..h {
                dst[k] += fi * dy[k];
                acc += urow[k].to_f64().unwrap() * dy[k];
            }
            dfbar[i] = acc;
        }
        let n = qs.norms[j];
        let df = if n > bound {
            let f = &qs.f_raw[j];
            let fdot = dot(f, &dfbar);
            (0..d).map(|i| bound / n * (dfbar[i] - f[i] * fdot / (n * n))).collect()
        } else {
            dfbar
        };
        df_all.push(df);
    }
    df_all
}

/// Loss and score-side gradients: `dL/dv` per cached row and `dL/dx_j`.
fn score_side(
    rows: &RowCache,
    x: &[Vec<f64>],
    positives: &[ItemId],
    negatives: &[ItemId],
    scale: f64,
) -> Result<(f64, BTreeMap<usize, f64>, Vec<(usize, usize)>)> {
    let mut uniq_pos: Vec<ItemId> = positives.to_vec();
    uniq_pos.sort_unstable();
    uniq_pos.dedup();

    // score and argmax column per distinct touched item
    let mut score: HashMap<usize, (f64, usize)> = HashMap::new();
    let mut eval = |id: ItemId| -> Result<(usize, f64)> {
        let s = rows.get(id)?;
        let (v, _) = *score.entry(s).or_insert_with(|| {
            let row = &rows.rows[s];
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (j, xj) in x.iter().enumerate() {
                let v = dot(row, xj);
                if v > best {
                    best = v;
                    arg = j;
                }
            }
            (best * scale, arg)
        });
        Ok((s, v))
    };

    let neg: Vec<(ItemId, usize, f64)> = negatives
        .iter()
        .map(|&z| eval(z).map(|(s, v)| (z, s, v)))
        .collect::<Result<_>>()?;

    let mut loss = 0.0;
    let mut dlogit: BTreeMap<usize, f64> = BTreeMap::new();
    for &p in &uniq_pos {
        let (ps, pv) = eval(p)?;
        let m = neg.iter().filter(|(z, _, _)| *z != p).map(|n| n.2).fold(pv, f64::max);
        let mut z = (pv - m).exp();
        for (zid, _, v) in &neg {
            if *zid != p {
                z += (v - m).exp();
            }
        }
        let lse = m + z.ln();
        loss += lse - pv;
        *dlogit.entry(ps).or_default() += (pv - lse).exp() - 1.0;
        for (zid, zs, v) in &neg {
            if *zid != p {
                *dlogit.entry(*zs).or_default() += (v - lse).exp();
            }
        }
    }
    let argmax: Vec<(usize, usize)> = dlogit.keys().map(|&s| (s, score[&s].1)).collect();
    // chain through the logit scale
    dlogit.values_mut().for_each(|g| *g *= scale);
    Ok((loss, dlogit, argmax))
}

/// Gradients of the mapping parameters and the input query block.
#[derive(Clone, Debug, PartialEq)]
pub struct NceGradients {
    /// `D x H`, row-major.
    pub u: Vec<f64>,
    pub gain: Vec<f64>,
    /// `dL/dv_i` for every touched item; equals the `V_dis` row gradient.
    pub item_rows: BTreeMap<usize, Vec<f64>>,
    /// `dL/dF`, one query per row.
    pub query: Vec<Vec<f64>>,
}

impl NceGradients {
    pub fn zeros(d: usize, h: usize) -> Self {
        NceGradients {
            u: vec![0.0; d * h],
            gain: vec![0.0; h],
            item_rows: BTreeMap::new(),
            query: Vec::new(),
        }
    }

    /// `V_dis` row gradients.
    pub fn v_dis(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.item_rows
    }

    /// `dL/dP_trans = Σ_i E_iᵀ dL/dv_i`, `G x H` row-major.
    pub fn p_trans<T: Real>(&self, mapping: &DecomposedMapping<T>) -> Vec<f64> {
        let (g, h) = (mapping.p_trans.rows(), mapping.rank());
        let mut out = vec![0.0; g * h];
        for (&i, dv) in &self.item_rows {
            for (gi, &e) in mapping.text.row(i).iter().enumerate() {
                let e = e.to_f64().unwrap();
                if e == 0.0 {
                    continue;
                }
                for (o, &d) in out[gi * h..(gi + 1) * h].iter_mut().zip(dv) {
                    *o += e * d;
                }
            }
        }
        out
    }

    fn add_assign(&mut self, other: &NceGradients) {
        add(&mut self.u, &other.u);
        add(&mut self.gain, &other.gain);
        merge_rows(&mut self.item_rows, &other.item_rows);
    }

    fn scale(&mut self, c: f64) {
        self.u.iter_mut().chain(self.gain.iter_mut()).for_each(|x| *x *= c);
        self.item_rows.values_mut().flatten().for_each(|x| *x *= c);
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn merge_rows(dst: &mut BTreeMap<usize, Vec<f64>>, src: &BTreeMap<usize, Vec<f64>>) {
    for (k, v) in src {
        match dst.get_mut(k) {
            Some(d) => add(d, v),
            None => {
                dst.insert(*k, v.clone());
            }
        }
    }
}

fn block_rows<T: Real>(f: &QueryBlock<T>) -> Vec<Vec<f64>> {
    (0..f.n_queries())
        .map(|j| f.column(j).iter().map(|x| x.to_f64().unwrap()).collect())
        .collect()
}

fn check_inputs<T: Real>(mapping: &DecomposedMapping<T>, f: &QueryBlock<T>, positives: &[ItemId]) -> Result<()> {
    if positives.is_empty() {
        return Err(Error::InvalidArgument("NCE needs at least one positive".into()));
    }
    if f.dim() != mapping.feature_dim() {
        return Err(Error::DimensionMismatch(format!(
            "query width {} but U has {} rows",
            f.dim(),
            mapping.feature_dim()
        )));
    }
    Ok(())
}

fn loss_and_grads_cached<T: Real>(
    mapping: &DecomposedMapping<T>,
    rows: &RowCache,
    f: &[Vec<f64>],
    positives: &[ItemId],
    negatives: &[ItemId],
    opts: &NceOptions,
) -> Result<(f64, NceGradients)> {
    let (d, h) = (mapping.feature_dim(), mapping.rank());
    let qs = query_forward(mapping, f, opts.bound);
    let (loss, dlogit, argmax) = score_side(rows, &qs.x, positives, negatives, opts.logit_scale)?;
    let mut grads = NceGradients::zeros(d, h);
    let mut dx = vec![vec![0.0; h]; qs.x.len()];
    for (slot, j) in argmax {
        let g = dlogit[&slot];
        let row = &rows.rows[slot];
        let dv: Vec<f64> = qs.x[j].iter().map(|x| g * x).collect();
        for (a, r) in dx[j].iter_mut().zip(row) {
            *a += g * r;
        }
        grads.item_rows.insert(rows.ids[slot].index(), dv);
    }
    grads.query = query_backward(mapping, &qs, &dx, opts.bound, &mut grads.u, &mut grads.gain);
    Ok((loss, grads))
}

/// NCE loss of a query block against positives and sampled negatives.
pub fn nce_loss<T: Real>(
    mapping: &DecomposedMapping<T>,
    f: &QueryBlock<T>,
    positives: &[ItemId],
    negatives: &[ItemId],
    opts: &NceOptions,
) -> Result<f64> {
    check_inputs(mapping, f, positives)?;
    let rows = RowCache::build(mapping, positives.iter().chain(negatives).copied())?;
    let qs = query_forward(mapping, &block_rows(f), opts.bound);
    Ok(score_side(&rows, &qs.x, positives, negatives, opts.logit_scale)?.0)
}

/// Loss plus exact gradients for the mapping parameters and the query block.
pub fn nce_gradients<T: Real>(
    mapping: &DecomposedMapping<T>,
    f: &QueryBlock<T>,
    positives: &[ItemId],
    negatives: &[ItemId],
    opts: &NceOptions,
) -> Result<(f64, NceGradients)> {
    check_inputs(mapping, f, positives)?;
    let rows = RowCache::build(mapping, positives.iter().chain(negatives).copied())?;
    loss_and_grads_cached(mapping, &rows, &block_rows(f), positives, negatives, opts)
}

/// Trainable parameters: the decomposed mapping plus the feature generator.
#[derive(Clone, Debug, PartialEq)]
pub struct UrmModel<T = f32> {
    pub mapping: DecomposedMapping<T>,
    pub generator: ToyFeatureGenerator<T>,
}

impl<T: Real> UrmModel<T> {
    pub fn cast<U: Real>(&self) -> UrmModel<U> {
        UrmModel {
            mapping: self.mapping.cast(),
            generator: self.generator.cast(),
        }
    }

    /// Query block for a history and objective.
    pub fn query_block(&self, history: &[ItemId], objective: &str) -> Result<QueryBlock<T>> {
        Ok(self.generator.forward(history, objective)?.0)
    }
}

/// One training example as seen by the loss.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub history: &'a [ItemId],
    pub objective: &'a str,
    pub positives: &'a [ItemId],
}

/// Gradients of every model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradients {
    pub mapping: NceGradients,
    /// `(M * D) x D_e`, row-major.
    pub heads: Vec<f64>,
    pub objective_embed: BTreeMap<usize, Vec<f64>>,
    pub item_embed: BTreeMap<usize, Vec<f64>>,
}

impl ModelGradients {
    pub fn zeros<T: Real>(model: &UrmModel<T>) -> Self {
        ModelGradients {
            mapping: NceGradients::zeros(model.mapping.feature_dim(), model.mapping.rank()),
            heads: vec![0.0; model.generator.heads.as_slice().len()],
            objective_embed: BTreeMap::new(),
            item_embed: BTreeMap::new(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGradients) {
        self.mapping.add_assign(&other.mapping);
        add(&mut self.heads, &other.heads);
        merge_rows(&mut self.objective_embed, &other.objective_embed);
        merge_rows(&mut self.item_embed, &other.item_embed);
    }

    pub fn scale(&mut self, c: f64) {
        self.mapping.scale(c);
        self.heads.iter_mut().for_each(|x| *x *= c);
        self.objective_embed
            .values_mut()
            .chain(self.item_embed.values_mut())
            .flatten()
            .for_each(|x| *x *= c);
    }
}

/// Loss and gradients for one example, reusing precomputed item rows.
pub fn model_gradients_cached<T: Real>(
    model: &UrmModel<T>,
    rows: &RowCache,
    example: &Example<'_>,
    negatives: &[ItemId],
    opts: &NceOptions,
) -> Result<(f64, ModelGradients)> {
    if example.positives.is_empty() {
        return Err(Error::InvalidArgument("NCE needs at least one positive".into()));
    }
    let gen = &model.generator;
    let pooled = gen.pool(example.history, example.objective)?;
    let e: Vec<f64> = pooled.pooled.iter().map(|x| x.to_f64().unwrap()).collect();
    let (m, d, de) = (gen.n_queries(), gen.feature_dim, gen.embed_dim());
    if d != model.mapping.feature_dim() {
        return Err(Error::DimensionMismatch(format!(
            "generator emits width {d}, mapping expects {}",
            model.mapping.feature_dim()
        )));
    }
    let f: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            (0..d)
                .map(|r| {
                    gen.head_row(j, r)
                        .iter()
                        .zip(&e)
                        .map(|(w, x)| w.to_f64().unwrap() * x)
                        .sum()
                })
                .collect()
        })
        .collect();
    let (loss, mapping_grads) = loss_and_grads_cached(&model.mapping, rows, &f, example.positives, negatives, opts)?;

    let mut heads = vec![0.0; m * d * de];
    let mut de_acc = vec![0.0; de];
    for (j, dfj) in mapping_grads.query.iter().enumerate() {
        for (r, &g) in dfj.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = j * d + r;
            let w = gen.heads.row(row);
            let dst = &mut heads[row * de..(row + 1) * de];
            for k in 0..de {
                dst[k] += g * e[k];
                de_acc[k] += g * w[k].to_f64().unwrap();
            }
        }
    }
    let mut objective_embed = BTreeMap::new();
    match pooled.objective_row {
        Some(k) => {
            objective_embed.insert(k, de_acc.clone());
        }
        None => {
            let n = gen.objective_embed.rows() as f64;
            for k in 0..gen.objective_embed.rows() {
                objective_embed.insert(k, de_acc.iter().map(|x| x / n).collect());
            }
        }
    }
    let item_embed = pooled
        .history_rows
        .iter()
        .map(|&(i, w)| {
            let w = w.to_f64().unwrap();
            (i, de_acc.iter().map(|x| x * w).collect())
        })
        .collect();
    Ok((
        loss,
        ModelGradients {
            mapping: mapping_grads,
            heads,
            objective_embed,
            item_embed,
        },
    ))
}

/// Loss and gradients of every model parameter for one example.
pub fn model_gradients<T: Real>(
    model: &UrmModel<T>,
    example: &Example<'_>,
    negatives: &[ItemId],
    opts: &NceOptions,
) -> Result<(f64, ModelGradients)> {
    let rows = RowCache::build(&model.mapping, example.positives.iter().chain(negatives).copied())?;
    model_gradients_cached(model, &rows, example, negatives, opts)
}

/// Loss only, for one example.
pub fn model_loss<T: Real>(
    model: &UrmModel<T>,
    example: &Example<'_>,
    negatives: &[ItemId],
    opts: &NceOptions,
) -> Result<f64> {
    let f = model.query_block(example.history, example.objective)?;
    nce_loss(&model.mapping, &f, example.positives, negatives, opts)
}

/// Materialize sparse row gradients as a dense matrix (tests and tooling).
pub fn dense_rows(rows: &BTreeMap<usize, Vec<f64>>, n_rows: usize, cols: usize) -> Matrix<f64> {
    let mut m = Matrix::zeros(n_rows, cols);
    for (&i, r) in rows {
        m.row_mut(i).copy_from_slice(r);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn mapping(n: usize, d: usize, h: usize, g: usize, seed: u64, head_norm: bool) -> DecomposedMapping<f64> {
        let mut r = crate::rng::stream(seed, 0);
        DecomposedMapping::new(
            Matrix::random_normal(d, h, 0.7, &mut r),
            Matrix::random_normal(n, h, 0.7, &mut r),
            Matrix::random_normal(g, h, 0.3, &mut r),
            Arc::new(Matrix::random_normal(n, g, 1.0, &mut r)),
            head_norm,
        )
        .unwrap()
    }

    fn ids(v: &[u32]) -> Vec<ItemId> {
        v.iter().map(|&i| ItemId(i)).collect()
    }

    #[test]
    fn no_negatives_means_zero_loss_and_zero_gradient() {
        let m = mapping(4, 3, 2, 2, 1, true);
        let f = QueryBlock::from_columns(&[vec![0.3, -1.0, 2.0]]).unwrap();
        let (loss, g) = nce_gradients(&m, &f, &ids(&[2]), &[], &NceOptions::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.u.iter().chain(&g.gain).all(|&x| x == 0.0));
        assert!(g.item_rows.values().flatten().all(|&x| x == 0.0));
        assert!(g.query.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn equal_scores_give_ln_two() {
        // identical effective rows for items 0 and 1
        let text = Arc::new(Matrix::zeros(2, 1));
        let v = Matrix::from_rows(&[vec![0.5, -0.2], vec![0.5, -0.2]]).unwrap();
        let m = DecomposedMapping::new(Matrix::identity(2), v, Matrix::zeros(1, 2), text, false).unwrap();
        let f = QueryBlock::from_columns(&[vec![1.0, 3.0]]).unwrap();
        let loss = nce_loss(&m, &f, &ids(&[0]), &ids(&[1]), &NceOptions::default()).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn copies_of_the_positive_are_dropped_from_negatives() {
        let m = mapping(5, 3, 2, 2, 2, false);
        let f = QueryBlock::from_columns(&[vec![0.3, -1.0, 2.0]]).unwrap();
        let o = NceOptions::default();
        let a = nce_loss(&m, &f, &ids(&[1]), &ids(&[1, 3, 1, 4]), &o).unwrap();
        let b = nce_loss(&m, &f, &ids(&[1]), &ids(&[3, 4]), &o).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_is_non_negative() {
        for seed in 0..20 {
            let m = mapping(8, 4, 3, 2, seed, seed % 2 == 0);
            let mut r = crate::rng::stream(seed, 5);
            let f = QueryBlock::from_matrix(Matrix::random_normal(2, 4, 3.0, &mut r)).unwrap();
            let l = nce_loss(&m, &f, &ids(&[0, 5]), &ids(&[1, 2, 2, 7]), &NceOptions::default()).unwrap();
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn rejects_empty_positives_and_bad_shapes() {
        let m = mapping(4, 3, 2, 2, 1, true);
        let f = QueryBlock::from_columns(&[vec![0.3, -1.0, 2.0]]).unwrap();
        let o = NceOptions::default();
        assert!(nce_loss(&m, &f, &[], &ids(&[1]), &o).is_err());
        let bad = QueryBlock::from_columns(&[vec![0.3, -1.0]]).unwrap();
        assert!(matches!(
            nce_loss(&m, &bad, &ids(&[0]), &ids(&[1]), &o),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
