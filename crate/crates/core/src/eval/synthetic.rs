//! Clustered synthetic catalogs and interaction logs.
//!
//! Items live in latent clusters. A user has a home cluster; under objective
//! `o` the user's target cluster is the one whose centroid is nearest to
//! `home + shift_o`, so objectives move demand between clusters. Histories
//! come from the home cluster (with some noise), positives from the target
//! cluster, and within a cluster popularity follows a Zipf law. Text features
//! are a noisy linear image of each item's latent position.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{save_interactions, CandidateCatalog, InteractionRecord, ItemId, ItemMetadata};
use crate::error::{Error, Result};
use crate::linalg::{sq_dist, standard_normal, Matrix};
use crate::rng::{self, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    pub items_per_cluster: usize,
    pub n_users: usize,
    /// Users whose records go to the test split.
    pub test_users: usize,
    pub history_len: usize,
    pub train_positives: usize,
    pub test_positives: usize,
    pub tags: Vec<String>,
    /// Fraction of each cluster kept out of all training data.
    pub unseen_fraction: f64,
    /// Share of history clicks drawn from a random cluster.
    pub history_noise: f64,
    pub latent_dim: usize,
    pub text_dim: usize,
    /// Item spread around its centroid, in latent units.
    pub item_spread: f64,
    /// Scale of per-objective shifts relative to centroid spread.
    pub shift_scale: f64,
    pub text_noise: f64,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_clusters: 20,
            items_per_cluster: 500,
            n_users: 5000,
            test_users: 1000,
            history_len: 20,
            train_positives: 5,
            test_positives: 10,
            tags: ["CPR", "RSA", "PPR", "RQ"].map(String::from).to_vec(),
            unseen_fraction: 0.1,
            history_noise: 0.2,
            latent_dim: 16,
            text_dim: 64,
            item_spread: 0.4,
            shift_scale: 1.0,
            text_noise: 0.3,
            zipf_exponent: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_clusters", self.n_clusters),
            ("items_per_cluster", self.items_per_cluster),
            ("n_users", self.n_users),
            ("history_len", self.history_len),
            ("train_positives", self.train_positives),
            ("test_positives", self.test_positives),
            ("latent_dim", self.latent_dim),
            ("text_dim", self.text_dim),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.tags.is_empty() {
            return Err(Error::InvalidArgument("at least one objective tag is required".into()));
        }
        if self.test_users >= self.n_users {
            return Err(Error::InvalidArgument(
                "test_users must leave some training users".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.unseen_fraction) || !(0.0..=1.0).contains(&self.history_noise) {
            return Err(Error::InvalidArgument("fractions must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn n_items(&self) -> usize {
        self.n_clusters * self.items_per_cluster
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub catalog: CandidateCatalog,
    pub train: Vec<InteractionRecord>,
    pub test: Vec<InteractionRecord>,
    /// Cluster of every item.
    pub clusters: Vec<usize>,
}

/// Paths written by [`SyntheticData::write`].
#[derive(Clone, Debug)]
pub struct SyntheticFiles {
    pub catalog: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
}

impl SyntheticData {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<SyntheticFiles> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = SyntheticFiles {
            catalog: dir.join("catalog.jsonl"),
            train: dir.join("train.jsonl"),
            test: dir.join("test.jsonl"),
        };
        self.catalog.save(&files.catalog)?;
        save_interactions(&files.train, &self.train)?;
        save_interactions(&files.test, &self.test)?;
        Ok(files)
    }
}

struct Cluster {
    /// Items ordered from most to least popular.
    by_rank: Vec<usize>,
    /// Seen subset of `by_rank`, same order.
    seen: Vec<usize>,
}

fn zipf_pick<R: Rng + ?Sized>(items: &[usize], cdf: &[f64], rng: &mut R) -> usize {
    let n = items.len();
    let u = rng.random::<f64>() * cdf[n - 1];
    items[cdf[..n].partition_point(|&c| c < u).min(n - 1)]
}

fn zipf_cdf(n: usize, exponent: f64) -> Vec<f64> {
    let mut acc = 0.0;
    (1..=n)
        .map(|r| {
            acc += (r as f64).powf(-exponent);
            acc
        })
        .collect()
}

/// Generate a dataset; a pure function of `spec`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, streams::SYNTHETIC);
    let (nc, per, l, g) = (spec.n_clusters, spec.items_per_cluster, spec.latent_dim, spec.text_dim);
    let n = spec.n_items();

    let normal = |rng: &mut rng::EngineRng, len: usize, s: f64| -> Vec<f64> {
        (0..len).map(|_| s * standard_normal(rng)).collect()
    };
    let centroids: Vec<Vec<f64>> = (0..nc).map(|_| normal(&mut rng, l, 1.0)).collect();
    let shifts: Vec<Vec<f64>> = spec
        .tags
        .iter()
        .map(|_| normal(&mut rng, l, spec.shift_scale))
        .collect();
    let text_map = normal(&mut rng, g * l, 1.0 / (l as f64).sqrt());

    let mut clusters_of = vec![0usize; n];
    let mut latent = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % nc;
        clusters_of[i] = c;
        let z: Vec<f64> = centroids[c]
            .iter()
            .map(|m| m + spec.item_spread * standard_normal(&mut rng))
            .collect();
        latent.push(z);
    }
    let mut text = Vec::with_capacity(n * g);
    for z in &latent {
        for r in 0..g {
            let v: f64 = (0..l).map(|k| text_map[r * l + k] * z[k]).sum();
            text.push((v + spec.text_noise * standard_normal(&mut rng)) as f32);
        }
    }

    let n_unseen = (per as f64 * spec.unseen_fraction).round() as usize;
    let mut unseen = vec![false; n];
    let clusters: Vec<Cluster> = (0..nc)
        .map(|c| {
            let mut members: Vec<usize> = (c..n).step_by(nc).collect();
            members.shuffle(&mut rng);
            let by_rank = members.clone();
            members.shuffle(&mut rng);
            for &i in &members[..n_unseen] {
                unseen[i] = true;
            }
            let seen = by_rank.iter().copied().filter(|&i| !unseen[i]).collect();
            Cluster { by_rank, seen }
        })
        .collect();
    let cdf = zipf_cdf(per, spec.zipf_exponent);

    // Target cluster of (home, objective).
    let target: Vec<Vec<usize>> = (0..nc)
        .map(|home| {
            shifts
                .iter()
                .map(|s| {
                    let p: Vec<f64> = centroids[home].iter().zip(s).map(|(a, b)| a + b).collect();
                    (0..nc)
                        .min_by(|&a, &b| sq_dist(&centroids[a], &p).total_cmp(&sq_dist(&centroids[b], &p)))
                        .expect("at least one cluster")
                })
                .collect()
        })
        .collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    let n_train_users = spec.n_users - spec.test_users;
    for u in 0..spec.n_users {
        let is_test = u >= n_train_users;
        let home = rng.random_range(0..nc);
        for (t, tag) in spec.tags.iter().enumerate() {
            let history: Vec<ItemId> = (0..spec.history_len)
                .map(|_| {
                    let c = if rng.random::<f64>() < spec.history_noise {
                        rng.random_range(0..nc)
                    } else {
                        home
                    };
                    let pool = &clusters[c].seen;
                    ItemId::from(zipf_pick(pool, &cdf, &mut rng))
                })
                .collect();
            let tc = &clusters[target[home][t]];
            let (pool, count) = if is_test {
                (&tc.by_rank, spec.test_positives)
            } else {
                (&tc.seen, spec.train_positives)
            };
            let mut positives: Vec<ItemId> = (0..count)
                .map(|_| ItemId::from(zipf_pick(pool, &cdf, &mut rng)))
                .collect();
            positives.sort_unstable();
            positives.dedup();
            let rec = InteractionRecord {
                user: format!("u{u}"),
                objective: tag.clone(),
                history,
                positives,
                ..Default::default()
            };
            if is_test {
                test.push(rec);
            } else {
                train.push(rec);
            }
        }
    }

    let mut freqs = vec![0u64; n];
    for rec in &train {
        for id in rec.history.iter().chain(&rec.positives) {
            freqs[id.index()] += 1;
        }
    }
    let metadata = (0..n)
        .map(|i| ItemMetadata {
            title: Some(format!("Item {i}")),
            category: Some(format!("Cluster {}", clusters_of[i])),
            ..Default::default()
        })
        .collect();
    let catalog = CandidateCatalog::new(freqs, Matrix::from_vec(n, g, text)?, metadata)?;
    Ok(SyntheticData {
        catalog,
        train,
        test,
        clusters: clusters_of,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_clusters: 4,
            items_per_cluster: 50,
            n_users: 40,
            test_users: 10,
            ..Default::default()
        }
    }

    #[test]
    fn unseen_items_never_appear_in_training() {
        let data = gen_synthetic(&small()).unwrap();
        let unseen = data.catalog.unseen_ids();
        assert_eq!(unseen.len(), 4 * 5);
        for rec in &data.train {
            assert!(rec
                .history
                .iter()
                .chain(&rec.positives)
                .all(|id| data.catalog.is_seen(*id)));
        }
        assert_eq!(data.train.len(), 30 * 4);
        assert_eq!(data.test.len(), 10 * 4);
    }

    #[test]
    fn positives_share_one_cluster() {
        let data = gen_synthetic(&small()).unwrap();
        for rec in data.train.iter().chain(&data.test) {
            let c = data.clusters[rec.positives[0].index()];
            assert!(rec.positives.iter().all(|p| data.clusters[p.index()] == c));
        }
    }

    #[test]
    fn same_seed_same_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let fa = gen_synthetic(&small()).unwrap().write(a.path()).unwrap();
        let fb = gen_synthetic(&small()).unwrap().write(b.path()).unwrap();
        for (x, y) in [(fa.catalog, fb.catalog), (fa.train, fb.train), (fa.test, fb.test)] {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }

    #[test]
    fn rejects_empty_sizes() {
        let spec = SyntheticSpec {
            n_clusters: 0,
            ..small()
        };
        assert!(gen_synthetic(&spec).is_err());
    }
}
