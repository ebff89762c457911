//! Bounded-degree nearest-neighbor graph over effective item rows.
//!
//! File layout (`URMG`), little-endian: magic | version u32 | n u64 |
//! degree u32 | n*degree u32 neighbor ids, short lists padded with
//! `0xFFFFFFFF` | crc32 u32 of every preceding byte.

use std::path::Path;

use rayon::prelude::*;

use crate::catalog::ItemId;
use crate::checkpoint::{verify_crc, Reader};
use crate::error::{Error, Result};
use crate::linalg::{norm, sq_dist, Matrix, Real};
use crate::scoring::{max_score, DecomposedMapping, ItemMode, ProjectedQueryBlock};

pub const MAGIC: &[u8; 4] = b"URMG";
pub const VERSION: u32 = 1;
pub const DEFAULT_DEGREE: usize = 32;

const PAD: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborGraph {
    n_items: usize,
    degree: usize,
    /// `n_items * degree`, padded with `PAD`.
    adjacency: Vec<ItemId>,
    lens: Vec<u32>,
}

impl NeighborGraph {
    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Maximum neighbors per item.
    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Stored neighbor list of `id`, nearest first.
    pub fn neighbors(&self, id: ItemId) -> Result<&[ItemId]> {
        let i = id.index();
        if i >= self.n_items {
            return Err(Error::OutOfRange {
                id: i,
                n_items: self.n_items,
            });
        }
        Ok(self.neighbors_unchecked(i))
    }

    #[inline]
    pub(crate) fn neighbors_unchecked(&self, i: usize) -> &[ItemId] {
        let start = i * self.degree;
        &self.adjacency[start..start + self.lens[i] as usize]
    }

    fn from_lists(n_items: usize, degree: usize, lists: Vec<Vec<ItemId>>) -> Self {
        let mut adjacency = vec![ItemId(PAD); n_items * degree];
        let mut lens = Vec::with_capacity(n_items);
        for (i, list) in lists.into_iter().enumerate() {
            debug_assert!(list.len() <= degree);
            adjacency[i * degree..i * degree + list.len()].copy_from_slice(&list);
            lens.push(list.len() as u32);
        }
        NeighborGraph {
            n_items,
            degree,
            adjacency,
            lens,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(24 + 4 * self.adjacency.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.n_items as u64).to_le_bytes());
        buf.extend_from_slice(&(self.degree as u32).to_le_bytes());
        for id in &self.adjacency {
            buf.extend_from_slice(&id.0.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let payload = verify_crc(bytes, MAGIC)?;
        let mut r = Reader::new(&payload[4..]);
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported graph version {version}")));
        }
        let n_items = r.u64()? as usize;
        let degree = r.u32()? as usize;
        let expected = n_items
            .checked_mul(degree)
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| Error::Corrupt("graph size overflows".into()))?;
        if r.remaining() != expected {
            return Err(Error::Corrupt(format!(
                "adjacency has {} bytes, expected {expected}",
                r.remaining()
            )));
        }
        let raw = r.take(expected)?;
        let adjacency: Vec<ItemId> = raw
            .chunks_exact(4)
            .map(|c| ItemId(u32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let mut lens = Vec::with_capacity(n_items);
        for i in 0..n_items {
            let row = &adjacency[i * degree..(i + 1) * degree];
            let len = row.iter().position(|id| id.0 == PAD).unwrap_or(degree);
            if row[len..].iter().any(|id| id.0 != PAD) {
                return Err(Error::Corrupt(format!("item {i}: neighbor after padding")));
            }
            if let Some(bad) = row[..len].iter().find(|id| id.index() >= n_items || id.index() == i) {
                return Err(Error::Corrupt(format!("item {i}: invalid neighbor {bad}")));
            }
            lens.push(len as u32);
        }
        Ok(NeighborGraph {
            n_items,
            degree,
            adjacency,
            lens,
        })
    }
}

pub fn save_graph(graph: &NeighborGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, graph.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<NeighborGraph> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    NeighborGraph::decode(&bytes)
}

/// Exact k-NN over the mapping's effective (sum-mode) item rows.
pub fn build_exact_knn<T: Real>(mapping: &DecomposedMapping<T>, degree: usize) -> Result<NeighborGraph> {
    build_exact_knn_rows(&mapping.effective_items(ItemMode::Sum), degree)
}

/// Exact k-NN by L2 over the rows of `items`. Lists are ordered by ascending
/// distance, then ascending id; self is excluded.
pub fn build_exact_knn_rows<T: Real>(items: &Matrix<T>, degree: usize) -> Result<NeighborGraph> {
    if degree == 0 {
        return Err(Error::InvalidArgument("graph degree must be at least 1".into()));
    }
    let n = items.rows();
    if n == 0 {
        return Err(Error::Empty("cannot index an empty item set".into()));
    }
    if n > PAD as usize {
        return Err(Error::InvalidArgument(format!("{n} items exceed the u32 id space")));
    }
    let k = if degree >= n {
        log::warn!("degree {degree} >= {n} items; clamping to {}", n - 1);
        n - 1
    } else {
        degree
    };
    let lists: Vec<Vec<ItemId>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = items.row(i);
            let mut cand: Vec<(f64, u32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(row, items.row(j)), j as u32))
                .collect();
            let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < cand.len() {
                cand.select_nth_unstable_by(k, cmp);
                cand.truncate(k);
            }
            cand.sort_unstable_by(cmp);
            cand.into_iter().map(|(_, j)| ItemId(j)).collect()
        })
        .collect();
    Ok(NeighborGraph::from_lists(n, k, lists))
}

/// How far apart neighbor scores are for one query block, next to the
/// `‖v_a − v_b‖ · max_j ‖F̂_j‖` bound that limits them.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NeighborGapStats {
    pub max_gap: f64,
    pub mean_gap: f64,
    /// Largest observed `gap / bound` ratio; never above 1.
    pub max_ratio: f64,
}

/// Inner-product-gap diagnostic over every graph edge.
pub fn neighbor_score_gaps<T: Real>(
    graph: &NeighborGraph,
    items: &Matrix<T>,
    q: &ProjectedQueryBlock<T>,
) -> NeighborGapStats {
    let qnorm = (0..q.n_queries()).map(|j| norm(q.column(j))).fold(0.0, f64::max);
    let scores: Vec<f64> = (0..items.rows()).map(|i| max_score(items.row(i), q).0).collect();
    let mut stats = NeighborGapStats::default();
    let mut edges = 0usize;
    for i in 0..graph.n_items() {
        for nb in graph.neighbors_unchecked(i) {
            let j = nb.index();
            let gap = (scores[i] - scores[j]).abs();
            let bound = sq_dist(items.row(i), items.row(j)).sqrt() * qnorm;
            stats.max_gap = stats.max_gap.max(gap);
            stats.mean_gap += gap;
            if bound > 0.0 {
                stats.max_ratio = stats.max_ratio.max(gap / bound);
            }
            edges += 1;
        }
    }
    if edges > 0 {
        stats.mean_gap /= edges as f64;
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(points: &[f64]) -> Matrix<f64> {
        Matrix::from_rows(&points.iter().map(|&p| vec![p]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn collinear_points() {
        let g = build_exact_knn_rows(&line(&[0.0, 1.0, 10.0]), 1).unwrap();
        assert_eq!(g.neighbors(ItemId(0)).unwrap(), &[ItemId(1)]);
        assert_eq!(g.neighbors(ItemId(1)).unwrap(), &[ItemId(0)]);
        assert_eq!(g.neighbors(ItemId(2)).unwrap(), &[ItemId(1)]);
    }

    #[test]
    fn degree_zero_rejected_and_large_degree_clamped() {
        assert!(build_exact_knn_rows(&line(&[0.0, 1.0]), 0).is_err());
        let g = build_exact_knn_rows(&line(&[0.0, 1.0, 3.0]), 10).unwrap();
        assert_eq!(g.degree(), 2);
        assert_eq!(g.neighbors(ItemId(2)).unwrap(), &[ItemId(1), ItemId(0)]);
    }

    #[test]
    fn identical_rows_order_by_id() {
        let g = build_exact_knn_rows(&line(&[5.0, 5.0, 5.0, 5.0]), 3).unwrap();
        assert_eq!(g.neighbors(ItemId(2)).unwrap(), &[ItemId(0), ItemId(1), ItemId(3)]);
        let again = build_exact_knn_rows(&line(&[5.0, 5.0, 5.0, 5.0]), 3).unwrap();
        assert_eq!(g.encode(), again.encode());
    }

    #[test]
    fn out_of_range_lookup() {
        let g = build_exact_knn_rows(&line(&[0.0, 1.0]), 1).unwrap();
        assert!(matches!(g.neighbors(ItemId(2)), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn single_item_graph_is_valid_file() {
        let g = build_exact_knn_rows(&line(&[0.0]), 4).unwrap();
        assert_eq!(g.degree(), 0);
        assert!(g.neighbors(ItemId(0)).unwrap().is_empty());
        let back = NeighborGraph::decode(&g.encode()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn truncated_or_corrupt_file_rejected() {
        let g = build_exact_knn_rows(&line(&[0.0, 1.0, 2.0, 4.0]), 2).unwrap();
        let bytes = g.encode();
        assert!(NeighborGraph::decode(&bytes[..bytes.len() - 5]).is_err());
        let mut bad = bytes.clone();
        bad[30] ^= 1;
        assert!(matches!(NeighborGraph::decode(&bad), Err(Error::Corrupt(_))));
    }

    #[test]
    fn gap_ratio_never_exceeds_bound() {
        let mut rng = crate::rng::stream(2, 0);
        let items = Matrix::<f64>::random_normal(50, 4, 1.0, &mut rng);
        let q = ProjectedQueryBlock::from_matrix(Matrix::random_normal(3, 4, 2.0, &mut rng)).unwrap();
        let g = build_exact_knn_rows(&items, 5).unwrap();
        let s = neighbor_score_gaps(&g, &items, &q);
        assert!(s.max_ratio <= 1.0 + 1e-12, "{s:?}");
        assert!(s.max_gap > 0.0);
    }
}
