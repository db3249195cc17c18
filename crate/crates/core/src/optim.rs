//! Adam with decoupled weight decay, and global-norm gradient clipping.

use crate::autodiff::Array;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: parameters shrink by `lr·weight_decay` before the
    /// moment update; the decay never enters the moment estimates.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::adam(learning_rate)
        }
    }
}

/// Optimizer state for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `params[i]` and `grads[i]` must keep the same lengths
    /// across calls.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
        } = self.cfg;
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        let decay = 1.0 - lr * wd;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            assert_eq!(p.len(), g.len(), "gradient shape");
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

pub fn global_norm(grads: &[Array]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Array], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias-corrected first step is lr·sign(g)
        let mut opt = AdamW::new(AdamConfig::adam(0.1));
        let mut p = vec![1.0, -2.0];
        opt.step(&mut [&mut p], &[&[4.0, -0.5]]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_rescales_only_above_threshold() {
        let mut g = vec![Array::vector(vec![3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].data(), &[3.0, 4.0]);
        clip_grad_norm(&mut g, 1.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    }
}
