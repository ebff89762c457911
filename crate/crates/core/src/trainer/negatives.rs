use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::catalog::ItemId;
use crate::error::{Error, Result};

/// Default exponent applied to item frequencies.
pub const DEFAULT_POWER: f64 = 0.75;

/// Draws negatives iid with probability proportional to `freq^power`.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    weights: Vec<f64>,
    table: WeightedIndex<f64>,
    power: f64,
}

impl NegativeSampler {
    pub fn new(frequencies: &[u64], power: f64) -> Result<Self> {
        if !power.is_finite() || power < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "power must be non-negative, got {power}"
            )));
        }
        // 0^0 would make never-seen items eligible; keep them at zero weight.
        let weights: Vec<f64> = frequencies
            .iter()
            .map(|&f| if f == 0 { 0.0 } else { (f as f64).powf(power) })
            .collect();
        let table = WeightedIndex::new(&weights)
            .map_err(|e| Error::InvalidArgument(format!("negative sampler weights: {e}")))?;
        Ok(NegativeSampler { weights, table, power })
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    /// Exact draw probability of every item.
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    /// `n` iid draws, with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<ItemId>> {
        if n == 0 {
            return Err(Error::InvalidArgument("must draw at least one negative".into()));
        }
        Ok((0..n).map(|_| ItemId::from(self.table.sample(rng))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_probabilities() {
        let even = NegativeSampler::new(&[1, 1], DEFAULT_POWER).unwrap();
        assert_eq!(even.probabilities(), vec![0.5, 0.5]);
        let skew = NegativeSampler::new(&[16, 1], DEFAULT_POWER).unwrap();
        let p = skew.probabilities();
        assert!((p[0] / p[1] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn zero_frequency_items_never_drawn() {
        let s = NegativeSampler::new(&[0, 3, 0], DEFAULT_POWER).unwrap();
        let mut rng = crate::rng::stream(1, 0);
        assert!(s.sample(1000, &mut rng).unwrap().iter().all(|i| i.0 == 1));
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(NegativeSampler::new(&[0, 0], DEFAULT_POWER).is_err());
        assert!(NegativeSampler::new(&[], DEFAULT_POWER).is_err());
        let s = NegativeSampler::new(&[1], DEFAULT_POWER).unwrap();
        assert!(s.sample(0, &mut crate::rng::stream(0, 0)).is_err());
    }
}
