//! Desk-scale feature generator: mean-pooled history embedding plus an
//! objective embedding, fed through `M` linear heads.

use rand::Rng;

use crate::catalog::{ItemId, DEFAULT_MAX_HISTORY};
use crate::error::{Error, Result};
use crate::linalg::{cast, Matrix, Real};
use crate::scoring::QueryBlock;

/// Anything that turns a user history and objective into `M` query columns.
pub trait FeatureGenerator {
    /// Width `D` of each query column.
    fn feature_dim(&self) -> usize;
    /// Number of query columns `M`.
    fn n_queries(&self) -> usize;
    /// Query block plus a warning when the objective tag was not recognised.
    fn generate(&self, history: &[ItemId], objective: &str) -> Result<(QueryBlock<f32>, Option<String>)>;
}

/// Pooled input of the generator before the heads are applied.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledInput<T> {
    /// `mean(item_embed[h]) + objective_embed[tag]`, length `D_e`.
    pub pooled: Vec<T>,
    /// Distinct history rows that contributed and their weights.
    pub history_rows: Vec<(usize, T)>,
    /// Objective row, `None` when the tag was unknown and the mean row was used.
    pub objective_row: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyFeatureGenerator<T = f32> {
    /// `|C| x D_e`.
    pub item_embed: Matrix<T>,
    /// `n_tags x D_e`, rows in `tags` order.
    pub objective_embed: Matrix<T>,
    pub tags: Vec<String>,
    /// `M` stacked `D x D_e` head matrices, `(M * D) x D_e`.
    pub heads: Matrix<T>,
    pub feature_dim: usize,
    pub max_history: usize,
}

impl<T: Real> ToyFeatureGenerator<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        n_items: usize,
        tags: Vec<String>,
        embed_dim: usize,
        feature_dim: usize,
        n_queries: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_queries == 0 || embed_dim == 0 || feature_dim == 0 {
            return Err(Error::InvalidArgument("generator dimensions must be positive".into()));
        }
        if tags.is_empty() {
            return Err(Error::InvalidArgument("at least one objective tag is required".into()));
        }
        let item_embed = Matrix::random_normal(n_items, embed_dim, std, rng);
        let objective_embed = Matrix::random_normal(tags.len(), embed_dim, std, rng);
        // Scaled so each head maps a unit-variance input to unit-variance output.
        let head_std = 1.0 / (embed_dim as f64).sqrt();
        let heads = Matrix::random_normal(n_queries * feature_dim, embed_dim, head_std, rng);
        Ok(ToyFeatureGenerator {
            item_embed,
            objective_embed,
            tags,
            heads,
            feature_dim,
            max_history: DEFAULT_MAX_HISTORY,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.item_embed.cols()
    }

    pub fn n_queries(&self) -> usize {
        self.heads.rows() / self.feature_dim
    }

    pub fn objective_index(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    pub fn validate(&self, n_items: usize) -> Result<()> {
        let de = self.embed_dim();
        if self.item_embed.rows() != n_items {
            return Err(Error::DimensionMismatch(format!(
                "generator has {} item rows, catalog has {n_items}",
                self.item_embed.rows()
            )));
        }
        if self.objective_embed.cols() != de || self.heads.cols() != de {
            return Err(Error::DimensionMismatch("generator embedding widths disagree".into()));
        }
        if self.objective_embed.rows() != self.tags.len() {
            return Err(Error::DimensionMismatch("objective rows and tags disagree".into()));
        }
        if self.feature_dim == 0 || !self.heads.rows().is_multiple_of(self.feature_dim) || self.heads.rows() == 0 {
            return Err(Error::DimensionMismatch("head stack is not a multiple of D".into()));
        }
        Ok(())
    }

    /// Pool the (truncated) history and the objective. Unknown objectives use
    /// the mean of all objective rows.
    pub fn pool(&self, history: &[ItemId], objective: &str) -> Result<PooledInput<T>> {
        let de = self.embed_dim();
        let recent = &history[history.len().saturating_sub(self.max_history)..];
        let mut acc = vec![0.0f64; de];
        let mut history_rows: Vec<(usize, T)> = Vec::new();
        if !recent.is_empty() {
            let w = 1.0 / recent.len() as f64;
            let mut sorted: Vec<usize> = recent.iter().map(|i| i.index()).collect();
            sorted.sort_unstable();
            for &i in &sorted {
                if i >= self.item_embed.rows() {
                    return Err(Error::OutOfRange {
                        id: i,
                        n_items: self.item_embed.rows(),
                    });
                }
                match history_rows.last_mut() {
                    Some((last, c)) if *last == i => *c = *c + cast(w),
                    _ => history_rows.push((i, cast(w))),
                }
            }
            for &(i, c) in &history_rows {
                let c = c.to_f64().unwrap();
                for (a, &x) in acc.iter_mut().zip(self.item_embed.row(i)) {
                    *a += c * x.to_f64().unwrap();
                }
            }
        }
        let objective_row = self.objective_index(objective);
        match objective_row {
            Some(k) => {
                for (a, &x) in acc.iter_mut().zip(self.objective_embed.row(k)) {
                    *a += x.to_f64().unwrap();
                }
            }
            None => {
                let n = self.objective_embed.rows() as f64;
                for row in self.objective_embed.iter_rows() {
                    for (a, &x) in acc.iter_mut().zip(row) {
                        *a += x.to_f64().unwrap() / n;
                    }
                }
            }
        }
        Ok(PooledInput {
            pooled: acc.into_iter().map(cast).collect(),
            history_rows,
            objective_row,
        })
    }

    /// Head `j` as a `D x D_e` row range of `heads`.
    pub fn head_row(&self, j: usize, d: usize) -> &[T] {
        self.heads.row(j * self.feature_dim + d)
    }

    /// Apply all heads to a pooled input; row `j` of the result is query `j`.
    pub fn apply_heads(&self, pooled: &[T]) -> Matrix<T> {
        let m = self.n_queries();
        let f = self.heads.matvec(pooled);
        Matrix::from_vec(m, self.feature_dim, f).expect("head output shape")
    }

    pub fn forward(&self, history: &[ItemId], objective: &str) -> Result<(QueryBlock<T>, Option<String>)> {
        let pooled = self.pool(history, objective)?;
        let warning = pooled
            .objective_row
            .is_none()
            .then(|| format!("unknown objective {objective:?}; using the default objective embedding"));
        Ok((QueryBlock::from_matrix(self.apply_heads(&pooled.pooled))?, warning))
    }

    pub fn cast<U: Real>(&self) -> ToyFeatureGenerator<U> {
        ToyFeatureGenerator {
            item_embed: self.item_embed.cast(),
            objective_embed: self.objective_embed.cast(),
            tags: self.tags.clone(),
            heads: self.heads.cast(),
            feature_dim: self.feature_dim,
            max_history: self.max_history,
        }
    }
}

impl FeatureGenerator for ToyFeatureGenerator<f32> {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn n_queries(&self) -> usize {
        ToyFeatureGenerator::n_queries(self)
    }

    fn generate(&self, history: &[ItemId], objective: &str) -> Result<(QueryBlock<f32>, Option<String>)> {
        self.forward(history, objective)
    }
}
