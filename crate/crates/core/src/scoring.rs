//! Score arithmetic: bound constraint, query projection, multi-query max
//! aggregation, temperature softmax and the exhaustive oracle.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::catalog::ItemId;
use crate::error::{Error, Result};
use crate::linalg::{cast, dot, norm, Matrix, Real};

/// Default per-query norm cap.
pub const DEFAULT_BOUND: f64 = 100.0;
/// Default sampling temperature.
pub const DEFAULT_TAU: f64 = 0.07;
/// Epsilon inside the RMS normalization.
pub const RMS_EPS: f64 = 1e-6;

/// `M` user representations of width `D`, stored one query per row.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBlock<T = f32> {
    columns: Matrix<T>,
}

impl<T: Real> QueryBlock<T> {
    /// Build from `M` columns of length `D`.
    pub fn from_columns(columns: &[Vec<T>]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::InvalidArgument("query block needs M >= 1".into()));
        }
        Self::from_matrix(Matrix::from_rows(columns)?)
    }

    /// `columns` is `M x D`: row `j` is query `j`.
    pub fn from_matrix(columns: Matrix<T>) -> Result<Self> {
        if columns.rows() == 0 {
            return Err(Error::InvalidArgument("query block needs M >= 1".into()));
        }
        Ok(QueryBlock { columns })
    }

    pub fn n_queries(&self) -> usize {
        self.columns.rows()
    }

    pub fn dim(&self) -> usize {
        self.columns.cols()
    }

    pub fn column(&self, j: usize) -> &[T] {
        self.columns.row(j)
    }

    pub fn as_matrix(&self) -> &Matrix<T> {
        &self.columns
    }
}

/// Query block whose columns all have L2 norm at most `bound`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundedQueryBlock<T = f32> {
    columns: Matrix<T>,
    bound: f64,
}

impl<T: Real> BoundedQueryBlock<T> {
    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn n_queries(&self) -> usize {
        self.columns.rows()
    }

    pub fn dim(&self) -> usize {
        self.columns.cols()
    }

    pub fn column(&self, j: usize) -> &[T] {
        self.columns.row(j)
    }

    pub fn into_block(self) -> QueryBlock<T> {
        QueryBlock { columns: self.columns }
    }
}

/// Scale each column whose norm exceeds `bound` back onto the sphere of
/// radius `bound`; shorter columns are returned untouched.
pub fn bound_constrain<T: Real>(f: &QueryBlock<T>, bound: f64) -> Result<BoundedQueryBlock<T>> {
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(Error::InvalidArgument(format!("bound must be positive, got {bound}")));
    }
    if !f.columns.is_finite() {
        return Err(Error::Numeric("non-finite query representation".into()));
    }
    let mut columns = f.columns.clone();
    for j in 0..columns.rows() {
        let n = norm(columns.row(j));
        let scale = (n / bound).max(1.0);
        if scale > 1.0 {
            let s: T = cast(scale);
            columns.row_mut(j).iter_mut().for_each(|x| *x = *x / s);
            // Rounding can leave the norm an ulp above the bound; shrink
            // until it is not, so a second pass is a no-op.
            let shrink = T::one() - T::epsilon();
            while norm(columns.row(j)) > bound {
                columns.row_mut(j).iter_mut().for_each(|x| *x = *x * shrink);
            }
        }
    }
    Ok(BoundedQueryBlock { columns, bound })
}

/// Queries mapped into the low-rank item space, one per row (`M x H`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedQueryBlock<T = f32> {
    columns: Matrix<T>,
}

impl<T: Real> ProjectedQueryBlock<T> {
    pub fn from_matrix(columns: Matrix<T>) -> Result<Self> {
        if columns.rows() == 0 {
            return Err(Error::InvalidArgument("projected block needs M >= 1".into()));
        }
        Ok(ProjectedQueryBlock { columns })
    }

    pub fn n_queries(&self) -> usize {
        self.columns.rows()
    }

    pub fn dim(&self) -> usize {
        self.columns.cols()
    }

    pub fn column(&self, j: usize) -> &[T] {
        self.columns.row(j)
    }

    pub fn as_matrix(&self) -> &Matrix<T> {
        &self.columns
    }
}

/// Which part of the decomposed item representation to score with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemMode {
    /// Per-item learnable rows only.
    Dis,
    /// Text-derived rows only.
    Trans,
    #[default]
    Sum,
}

impl std::str::FromStr for ItemMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dis" => Ok(ItemMode::Dis),
            "trans" => Ok(ItemMode::Trans),
            "sum" => Ok(ItemMode::Sum),
            other => Err(Error::InvalidArgument(format!("unknown item mode {other}"))),
        }
    }
}

impl std::fmt::Display for ItemMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ItemMode::Dis => "dis",
            ItemMode::Trans => "trans",
            ItemMode::Sum => "sum",
        })
    }
}

/// Low-rank item mapping `W = U (V_dis + E_text P_trans)ᵀ` plus the RMS
/// normalization applied to projected queries.
#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedMapping<T = f32> {
    /// `D x H`.
    pub u: Matrix<T>,
    /// `|C| x H`.
    pub v_dis: Matrix<T>,
    /// `G x H`.
    pub p_trans: Matrix<T>,
    /// Fixed item text features, `|C| x G`.
    pub text: Arc<Matrix<T>>,
    pub head_norm: bool,
    /// RMS gain, length `H`.
    pub gain: Vec<T>,
}

impl<T: Real> DecomposedMapping<T> {
    pub fn new(
        u: Matrix<T>,
        v_dis: Matrix<T>,
        p_trans: Matrix<T>,
        text: Arc<Matrix<T>>,
        head_norm: bool,
    ) -> Result<Self> {
        let h = u.cols();
        let gain = vec![T::one(); h];
        let m = DecomposedMapping {
            u,
            v_dis,
            p_trans,
            text,
            head_norm,
            gain,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.rank();
        let mismatch = |what: String| Err(Error::DimensionMismatch(what));
        if self.v_dis.cols() != h || self.p_trans.cols() != h || self.gain.len() != h {
            return mismatch(format!(
                "rank disagreement: U has {h} columns, V_dis {}, P_trans {}, gain {}",
                self.v_dis.cols(),
                self.p_trans.cols(),
                self.gain.len()
            ));
        }
        if self.text.rows() != self.v_dis.rows() {
            return mismatch(format!(
                "{} text rows but {} V_dis rows",
                self.text.rows(),
                self.v_dis.rows()
            ));
        }
        if self.text.cols() != self.p_trans.rows() {
            return mismatch(format!(
                "text width {} but P_trans has {} rows",
                self.text.cols(),
                self.p_trans.rows()
            ));
        }
        Ok(())
    }

    /// Feature width `D`.
    pub fn feature_dim(&self) -> usize {
        self.u.rows()
    }

    /// Low rank `H`.
    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn n_items(&self) -> usize {
        self.v_dis.rows()
    }

    fn check(&self, id: ItemId) -> Result<()> {
        if id.index() < self.n_items() {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                id: id.index(),
                n_items: self.n_items(),
            })
        }
    }

    /// Effective item row in the requested mode.
    pub fn effective_item_row(&self, id: ItemId, mode: ItemMode) -> Result<Vec<T>> {
        self.check(id)?;
        Ok(self.effective_row_unchecked(id.index(), mode))
    }

    pub(crate) fn effective_row_unchecked(&self, i: usize, mode: ItemMode) -> Vec<T> {
        let h = self.rank();
        let mut acc = vec![0.0f64; h];
        if mode != ItemMode::Trans {
            for (a, &v) in acc.iter_mut().zip(self.v_dis.row(i)) {
                *a += v.to_f64().unwrap();
            }
        }
        if mode != ItemMode::Dis {
            for (g, &e) in self.text.row(i).iter().enumerate() {
                let e = e.to_f64().unwrap();
                if e == 0.0 {
                    continue;
                }
                for (a, &p) in acc.iter_mut().zip(self.p_trans.row(g)) {
                    *a += e * p.to_f64().unwrap();
                }
            }
        }
        acc.into_iter().map(cast).collect()
    }

    /// All effective item rows, `|C| x H`.
    pub fn effective_items(&self, mode: ItemMode) -> Matrix<T> {
        use rayon::prelude::*;
        let h = self.rank();
        let data: Vec<T> = (0..self.n_items())
            .into_par_iter()
            .flat_map_iter(|i| self.effective_row_unchecked(i, mode))
            .collect();
        Matrix::from_vec(self.n_items(), h, data).expect("shape")
    }

    /// Element-type conversion of every parameter.
    pub fn cast<U: Real>(&self) -> DecomposedMapping<U> {
        DecomposedMapping {
            u: self.u.cast(),
            v_dis: self.v_dis.cast(),
            p_trans: self.p_trans.cast(),
            text: Arc::new(self.text.cast()),
            head_norm: self.head_norm,
            gain: self.gain.iter().map(|g| cast(g.to_f64().unwrap())).collect(),
        }
    }
}

/// RMS-normalize `y` in place with gain `g`; returns the RMS used.
pub(crate) fn rms_normalize<T: Real>(y: &mut [T], gain: &[T]) -> f64 {
    let h = y.len() as f64;
    let rms = (dot(y, y) / h + RMS_EPS).sqrt();
    for (x, &g) in y.iter_mut().zip(gain) {
        *x = cast(x.to_f64().unwrap() * g.to_f64().unwrap() / rms);
    }
    rms
}

/// `F̂ = Uᵀ F̄`, RMS-normalized per column when the mapping has `head_norm`.
pub fn project_queries<T: Real>(
    mapping: &DecomposedMapping<T>,
    f: &BoundedQueryBlock<T>,
) -> Result<ProjectedQueryBlock<T>> {
    if f.dim() != mapping.feature_dim() {
        return Err(Error::DimensionMismatch(format!(
            "query width {} but U has {} rows",
            f.dim(),
            mapping.feature_dim()
        )));
    }
    let m = f.n_queries();
    let h = mapping.rank();
    let mut out = Matrix::zeros(m, h);
    for j in 0..m {
        let mut y = mapping.u.matvec_t(f.column(j));
        if mapping.head_norm {
            rms_normalize(&mut y, &mapping.gain);
        }
        out.row_mut(j).copy_from_slice(&y);
    }
    ProjectedQueryBlock::from_matrix(out)
}

/// Max over query columns of `<row, F̂_j>`, with the smallest maximizing `j`.
#[inline]
pub fn max_score<T: Real>(row: &[T], q: &ProjectedQueryBlock<T>) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for j in 0..q.n_queries() {
        let s = dot(row, q.column(j));
        if s > best {
            best = s;
            arg = j;
        }
    }
    (best, arg)
}

/// Scores for a subset of items.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreVector {
    pub ids: Vec<ItemId>,
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Best `k` entries by descending score, ties by ascending id.
    pub fn top_k(&self, k: usize) -> Vec<(ItemId, f64)> {
        let mut pairs: Vec<(ItemId, f64)> = self.ids.iter().copied().zip(self.scores.iter().copied()).collect();
        sort_desc(&mut pairs);
        pairs.truncate(k);
        pairs
    }
}

/// Sort `(id, score)` by descending score, then ascending id.
pub fn sort_desc(pairs: &mut [(ItemId, f64)]) {
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Multi-query max scores of `ids` against `q`, reading rows from the
/// effective item matrix `items`.
pub fn score_items<T: Real>(items: &Matrix<T>, ids: &[ItemId], q: &ProjectedQueryBlock<T>) -> Result<ScoreVector> {
    if items.cols() != q.dim() {
        return Err(Error::DimensionMismatch(format!(
            "item rows have width {} but queries have {}",
            items.cols(),
            q.dim()
        )));
    }
    let mut scores = Vec::with_capacity(ids.len());
    for &id in ids {
        if id.index() >= items.rows() {
            return Err(Error::OutOfRange {
                id: id.index(),
                n_items: items.rows(),
            });
        }
        scores.push(max_score(items.row(id.index()), q).0);
    }
    Ok(ScoreVector {
        ids: ids.to_vec(),
        scores,
    })
}

/// Scores of every row of `items`.
pub fn score_all<T: Real>(items: &Matrix<T>, q: &ProjectedQueryBlock<T>) -> Result<ScoreVector> {
    let ids: Vec<ItemId> = (0..items.rows()).map(ItemId::from).collect();
    score_items(items, &ids, q)
}

/// `softmax(s / tau)` with a max shift; sums accumulate in `f64`.
pub fn softmax_tau(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty("softmax of an empty score vector".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let shift = scores.iter().map(|s| s / tau).fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let mut p: Vec<f64> = scores.iter().map(|s| (s / tau - shift).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    Ok(p)
}

/// Exact retrieval distribution over the whole catalog.
pub fn full_distribution<T: Real>(
    mapping: &DecomposedMapping<T>,
    f: &BoundedQueryBlock<T>,
    tau: f64,
) -> Result<Vec<f64>> {
    let q = project_queries(mapping, f)?;
    let items = mapping.effective_items(ItemMode::Sum);
    softmax_tau(&score_all(&items, &q)?.scores, tau)
}
