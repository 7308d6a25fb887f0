use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Endless stream of example indices drawn with probability proportional
/// to `1 / |class of example|`, so every class is equally likely.
pub struct BalancedSampler {
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    /// `num_classes` lets callers insist that every class is present.
    pub fn new(labels: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let mut counts = vec![0usize; num_classes];
        for &l in labels {
            if l >= num_classes {
                return Err(Error::invalid(format!("label {l} out of range for {num_classes} classes")));
            }
            counts[l] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::invalid(format!("class {c} has no examples")));
        }
        let weights = labels.iter().map(|&l| 1.0 / counts[l] as f64);
        let dist = WeightedIndex::new(weights).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(BalancedSampler {
            dist,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl Iterator for BalancedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.dist.sample(&mut self.rng))
    }
}

/// Class-balanced index stream over `labels`.
pub fn balanced_indices(labels: &[usize], seed: u64) -> Result<BalancedSampler> {
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    if num_classes == 0 {
        return Err(Error::invalid("no labels to sample from"));
    }
    BalancedSampler::new(labels, num_classes, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fraction(labels: &[usize], draws: usize, class: usize) -> f64 {
        let s = balanced_indices(labels, 17).unwrap();
        s.take(draws).filter(|&i| labels[i] == class).count() as f64 / draws as f64
    }

    #[test]
    fn ninety_ten_balances() {
        let mut labels = vec![0; 90];
        labels.extend(vec![1; 10]);
        let f = fraction(&labels, 10_000, 1);
        assert!((f - 0.5).abs() <= 0.02, "{f}");
    }

    #[test]
    fn balanced_is_uniform() {
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let mut hits = [0usize; 10];
        for i in balanced_indices(&labels, 1).unwrap().take(20_000) {
            hits[i] += 1;
        }
        assert!(hits.iter().all(|&h| (h as f64 / 2000.0 - 1.0).abs() < 0.1), "{hits:?}");
    }

    #[test]
    fn one_per_class() {
        let f = fraction(&[0, 1], 10_000, 0);
        assert!((f - 0.5).abs() <= 0.02);
    }

    #[test]
    fn empty_class_rejected() {
        assert!(BalancedSampler::new(&[0, 0, 2], 3, 0).is_err());
        assert!(balanced_indices(&[], 0).is_err());
    }
}
