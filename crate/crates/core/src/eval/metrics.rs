use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::catalog::ItemId;
use crate::error::{Error, Result};

/// `|top-K(retrieved) ∩ truth| / |truth|`. A list shorter than `k` is used
/// whole; duplicate entries count once.
pub fn recall_at_k(retrieved: &[ItemId], truth: &HashSet<ItemId>, k: usize) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Empty("recall needs a non-empty ground truth".into()));
    }
    let mut hit = HashSet::new();
    for id in retrieved.iter().take(k) {
        if truth.contains(id) {
            hit.insert(*id);
        }
    }
    Ok(hit.len() as f64 / truth.len() as f64)
}

/// Sampled recall over oracle recall against the same truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Precision {
    pub sampled_recall: f64,
    pub oracle_recall: f64,
    /// `NaN` when the oracle recall is zero.
    pub precision: f64,
    pub defined: bool,
}

impl Precision {
    pub fn new(sampled_recall: f64, oracle_recall: f64) -> Self {
        let defined = oracle_recall > 0.0;
        Precision {
            sampled_recall,
            oracle_recall,
            precision: if defined {
                sampled_recall / oracle_recall
            } else {
                f64::NAN
            },
            defined,
        }
    }
}

/// Retrieval precision of a sampled list relative to the exact top-K.
pub fn retrieval_precision(
    sampled: &[ItemId],
    oracle_topk: &[ItemId],
    truth: &HashSet<ItemId>,
    k: usize,
) -> Result<Precision> {
    Ok(Precision::new(
        recall_at_k(sampled, truth, k)?,
        recall_at_k(oracle_topk, truth, k)?,
    ))
}

/// Multiply-accumulate counts of sampled and exhaustive scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopEstimate {
    pub sampled: u128,
    pub full: u128,
}

impl FlopEstimate {
    pub fn ratio(&self) -> f64 {
        self.full as f64 / self.sampled as f64
    }
}

/// `sampled = M·H·(D + T·K·max_nbr)`, `full = M·D·|C|`.
pub fn flops_estimate(m: u64, h: u64, d: u64, t: u64, k: u64, max_nbr: u64, n_items: u64) -> Result<FlopEstimate> {
    if [m, h, d, k, max_nbr, n_items].contains(&0) {
        return Err(Error::InvalidArgument("flop estimate needs positive sizes".into()));
    }
    let w = |x: u64| x as u128;
    let overflow = || Error::Numeric("flop count overflows 128 bits".into());
    let inner = w(t)
        .checked_mul(w(k))
        .and_then(|x| x.checked_mul(w(max_nbr)))
        .and_then(|x| x.checked_add(w(d)))
        .ok_or_else(overflow)?;
    let sampled = w(m)
        .checked_mul(w(h))
        .and_then(|x| x.checked_mul(inner))
        .ok_or_else(overflow)?;
    let full = w(m)
        .checked_mul(w(d))
        .and_then(|x| x.checked_mul(w(n_items)))
        .ok_or_else(overflow)?;
    Ok(FlopEstimate { sampled, full })
}
