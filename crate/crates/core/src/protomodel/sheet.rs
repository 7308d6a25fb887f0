use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// The sparse non-negative `P × C` linear layer, read as a scoring sheet.
///
/// Disabling keeps the stored weights so a prototype can be re-enabled;
/// only the effective weights change.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoringSheet {
    weights: Tensor,
    disabled: BTreeSet<usize>,
    relevance_epsilon: f32,
}

impl ScoringSheet {
    pub fn zeros(num_prototypes: usize, num_classes: usize, relevance_epsilon: f32) -> Self {
        ScoringSheet {
            weights: Tensor::zeros(vec![num_prototypes, num_classes]),
            disabled: BTreeSet::new(),
            relevance_epsilon,
        }
    }

    /// Builds a sheet from a row-major `P × C` matrix. Negative entries are rejected.
    pub fn from_weights(weights: Tensor, relevance_epsilon: f32) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(Error::shape(
                "ScoringSheet",
                format!("weights must be P x C, got {:?}", weights.shape()),
            ));
        }
        if weights.data().iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::invalid("scoring-sheet weights must be non-negative"));
        }
        Ok(ScoringSheet {
            weights,
            disabled: BTreeSet::new(),
            relevance_epsilon,
        })
    }

    pub fn num_prototypes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn relevance_epsilon(&self) -> f32 {
        self.relevance_epsilon
    }

    /// Stored weights, including those of disabled prototypes.
    pub fn raw(&self) -> &Tensor {
        &self.weights
    }

    pub(crate) fn raw_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn raw_weight(&self, prototype: usize, class: usize) -> f32 {
        self.weights.data()[prototype * self.num_classes() + class]
    }

    /// Weight actually used for scoring: zero for disabled prototypes and
    /// for entries below the relevance threshold.
    pub fn effective_weight(&self, prototype: usize, class: usize) -> f32 {
        if self.disabled.contains(&prototype) {
            return 0.0;
        }
        let w = self.raw_weight(prototype, class);
        if w < self.relevance_epsilon {
            0.0
        } else {
            w
        }
    }

    pub fn effective_row(&self, prototype: usize) -> Vec<f32> {
        (0..self.num_classes())
            .map(|c| self.effective_weight(prototype, c))
            .collect()
    }

    /// Row-major effective weight matrix.
    pub fn effective(&self) -> Vec<f32> {
        (0..self.num_prototypes())
            .flat_map(|i| self.effective_row(i))
            .collect()
    }

    /// True when the prototype has an effective nonzero weight to some class.
    pub fn is_relevant(&self, prototype: usize) -> bool {
        (0..self.num_classes()).any(|c| self.effective_weight(prototype, c) > 0.0)
    }

    pub fn relevant_prototypes(&self) -> Vec<usize> {
        (0..self.num_prototypes())
            .filter(|&i| self.is_relevant(i))
            .collect()
    }

    /// Fraction of effective weights that are zero.
    pub fn sparsity_ratio(&self) -> f64 {
        let total = self.weights.numel();
        if total == 0 {
            return 1.0;
        }
        let zeros = (0..self.num_prototypes())
            .flat_map(|i| self.effective_row(i))
            .filter(|&w| w == 0.0)
            .count();
        zeros as f64 / total as f64
    }

    /// Number of prototypes with at least one effective nonzero weight.
    pub fn global_size(&self) -> usize {
        self.relevant_prototypes().len()
    }

    pub fn disabled(&self) -> &BTreeSet<usize> {
        &self.disabled
    }

    pub fn is_disabled(&self, prototype: usize) -> bool {
        self.disabled.contains(&prototype)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.num_prototypes()) {
            Some(i) => Err(Error::invalid(format!(
                "prototype {i} out of range (model has {})",
                self.num_prototypes()
            ))),
            None => Ok(()),
        }
    }

    /// Returns the ids whose state actually changed.
    pub fn disable(&mut self, ids: &[usize]) -> Result<Vec<usize>> {
        self.check_ids(ids)?;
        Ok(ids.iter().copied().filter(|&i| self.disabled.insert(i)).collect())
    }

    pub fn enable(&mut self, ids: &[usize]) -> Result<Vec<usize>> {
        self.check_ids(ids)?;
        Ok(ids.iter().copied().filter(|&i| self.disabled.remove(&i)).collect())
    }

    pub fn set_disabled(&mut self, ids: impl IntoIterator<Item = usize>) -> Result<()> {
        let ids: Vec<usize> = ids.into_iter().collect();
        self.check_ids(&ids)?;
        self.disabled = ids.into_iter().collect();
        Ok(())
    }

    /// Replaces stored weights by `max(w - shrink, 0)`.
    pub fn clamp_and_shrink(&mut self, shrink: f32) {
        for w in self.weights.data_mut() {
            *w = (*w - shrink).max(0.0);
        }
    }

    /// Copy with disabled rows and sub-threshold dust written as zeros.
    pub fn baked(&self) -> ScoringSheet {
        let eff = self.effective();
        ScoringSheet {
            weights: Tensor::new(self.weights.shape().to_vec(), eff).expect("same shape"),
            disabled: BTreeSet::new(),
            relevance_epsilon: self.relevance_epsilon,
        }
    }

    /// `scores[c] = Σ_i p[i] · W_eff[i, c]`.
    pub fn scores(&self, presence: &[f32]) -> Vec<f32> {
        let c = self.num_classes();
        let mut acc = vec![0.0f64; c];
        for (i, &p) in presence.iter().enumerate() {
            if p == 0.0 || self.disabled.contains(&i) {
                continue;
            }
            for (k, a) in acc.iter_mut().enumerate() {
                *a += p as f64 * self.effective_weight(i, k) as f64;
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sheet(rows: &[[f32; 2]]) -> ScoringSheet {
        let data = rows.iter().flatten().copied().collect();
        ScoringSheet::from_weights(Tensor::new(vec![rows.len(), 2], data).unwrap(), 1e-3).unwrap()
    }

    #[test]
    fn rejects_negative_weights() {
        let t = Tensor::new(vec![1, 2], vec![0.5, -0.1]).unwrap();
        assert!(ScoringSheet::from_weights(t, 1e-3).is_err());
    }

    #[test]
    fn sparsity_counts_dust_as_zero() {
        // 9 of 10 entries below 1e-3
        let s = sheet(&[[0.5, 0.0], [1e-4, 0.0], [0.0, 9e-4], [0.0, 0.0], [0.0, 0.0]]);
        assert!((s.sparsity_ratio() - 0.9).abs() < 1e-12);
        assert_eq!(s.global_size(), 1);
    }

    #[test]
    fn disable_enable_bookkeeping() {
        let mut s = sheet(&[[2.0, 0.0], [0.0, 5.0]]);
        assert_eq!(s.disable(&[1, 1]).unwrap(), vec![1]);
        assert!(s.disable(&[1]).unwrap().is_empty());
        assert_eq!(s.effective_row(1), vec![0.0, 0.0]);
        assert_eq!(s.raw_weight(1, 1), 5.0);
        assert_eq!(s.global_size(), 1);
        assert_eq!(s.baked().raw_weight(1, 1), 0.0);
        assert_eq!(s.enable(&[1]).unwrap(), vec![1]);
        assert_eq!(s.effective_row(1), vec![0.0, 5.0]);
        assert!(s.disable(&[7]).is_err());
    }

    #[test]
    fn clamp_and_shrink() {
        let mut s = sheet(&[[0.5, 0.0005]]);
        s.clamp_and_shrink(0.001);
        assert_eq!(s.raw().data(), &[0.499, 0.0]);
    }
}
