use crate::numerics::Tensor;

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `w ← w − lr·v`.
///
/// Reads gradients from each tensor's `grad` slot, so the caller decides
/// when those are accumulated and cleared.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Scales gradients so their joint L2 norm is at most `max_norm` (0 = off).
    /// Returns the norm before clipping.
    pub fn clip(params: &mut [&mut Tensor], max_norm: f32) -> f64 {
        let norm = params
            .iter()
            .filter_map(|p| p.grad())
            .flat_map(|g| g.iter())
            .map(|&g| g as f64 * g as f64)
            .sum::<f64>()
            .sqrt();
        if max_norm > 0.0 && norm > max_norm as f64 {
            let s = (max_norm as f64 / norm) as f32;
            for p in params.iter_mut() {
                for g in p.grad_mut().into_iter().flatten() {
                    *g *= s;
                }
            }
        }
        norm
    }

    /// One update; `params[i]` is paired with `lrs[i]`. The parameter list
    /// must keep the same order and shapes between calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], lrs: &[f32]) {
        assert_eq!(params.len(), lrs.len(), "one learning rate per parameter");
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for ((p, &lr), v) in params.iter_mut().zip(lrs).zip(&mut self.velocity) {
            let Some(g) = p.grad() else { continue };
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = self.momentum * *vi + gi;
            }
            for (w, &vi) in p.data_mut().iter_mut().zip(v.iter()) {
                *w -= lr * vi;
            }
        }
    }
}
